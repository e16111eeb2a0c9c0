"""Tests for the MCP tools: JSON results on success, JSON error documents on failure."""

import json

import pytest

from lighttbnet.core.config import RunConfig
from lighttbnet.core import server
from lighttbnet.core.server import _ensemble, configure, efficiency_report, explain_prediction, predict_tb_score


@pytest.fixture(autouse=True)
def run_config(tmp_path):
    configure(RunConfig(output_dir=str(tmp_path / "run")))
    yield
    configure(RunConfig())


class TestPredictTool:
    """predict_tb_score"""

    @pytest.mark.asyncio
    async def test_returns_ensemble_score(self, ensemble_dir, cxr_png):
        result = await predict_tb_score(image_path=str(cxr_png), checkpoint_dir=str(ensemble_dir))
        data = json.loads(result)
        assert 0.0 <= data["tb_score"] <= 1.0
        assert len(data["fold_scores"]) == 5
        assert data["fold_scores"][0] == pytest.approx(data["tb_score"], abs=1e-9)

    @pytest.mark.asyncio
    async def test_missing_checkpoints(self, tmp_path, cxr_png):
        data = json.loads(await predict_tb_score(image_path=str(cxr_png), checkpoint_dir=str(tmp_path / "none")))
        assert data["kind"] == "MissingCheckpointError"
        assert len(data["details"]["missing"]) == 5

    @pytest.mark.asyncio
    async def test_unreadable_image(self, tmp_path, ensemble_dir):
        data = json.loads(await predict_tb_score(image_path=str(tmp_path / "absent.png"),
                                                 checkpoint_dir=str(ensemble_dir)))
        assert data["kind"] == "ImageError"
        assert "error" in data


class TestExplainTool:
    """explain_prediction"""

    @pytest.mark.asyncio
    async def test_default_output_and_fold(self, tmp_path, ensemble_dir, cxr_png):
        data = json.loads(await explain_prediction(image_path=str(cxr_png), checkpoint_dir=str(ensemble_dir)))
        assert data["fold"] == 4
        assert data["path"] == str(tmp_path / "run" / "explain" / "cxr.png")
        assert data["gradcam"]["target_layer"] == "blocks.1"

    @pytest.mark.asyncio
    async def test_explicit_fold_and_path(self, tmp_path, ensemble_dir, cxr_png):
        out = tmp_path / "overlay.png"
        data = json.loads(await explain_prediction(image_path=str(cxr_png), checkpoint_dir=str(ensemble_dir),
                                                   output_path=str(out), fold=2))
        assert data["fold"] == 2
        assert out.is_file()

    @pytest.mark.asyncio
    async def test_runs_on_a_private_model_copy(self, monkeypatch, ensemble_dir, cxr_png):
        seen = []

        def capture(model, image, out_path):
            seen.append(model)
            return {"path": str(out_path)}

        monkeypatch.setattr(server, "explain_image", capture)
        data = json.loads(await explain_prediction(image_path=str(cxr_png), checkpoint_dir=str(ensemble_dir)))
        assert data["fold"] == 4
        cached = [model for model, _ in _ensemble(str(ensemble_dir))]
        assert len(seen) == 1 and all(seen[0] is not model for model in cached)
        assert not seen[0].training

    @pytest.mark.asyncio
    async def test_unknown_fold(self, ensemble_dir, cxr_png):
        data = json.loads(await explain_prediction(image_path=str(cxr_png), checkpoint_dir=str(ensemble_dir),
                                                   fold=9))
        assert data["kind"] == "ExplainError"
        assert data["details"]["available"] == [0, 1, 2, 3, 4]


class TestEfficiencyTool:
    """efficiency_report"""

    @pytest.mark.asyncio
    async def test_reports_per_block_count(self):
        data = json.loads(await efficiency_report(n_blocks=[2, 3], input_size=32, reps=0))
        names = [r["name"] for r in data["reports"]]
        assert names == ["LightTBNet (N=2)", "LightTBNet (N=3)"]
        assert all(r["inference_mean_ms"] is None for r in data["reports"])
        assert data["reports"][0]["params_total"] > 0

    @pytest.mark.asyncio
    async def test_invalid_block_count(self):
        data = json.loads(await efficiency_report(n_blocks=[9], input_size=32, reps=0))
        assert data["kind"] == "ConfigError"
