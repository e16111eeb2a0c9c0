"""
LightTBNet - Main Entry Point

This module allows the package to be executed directly via `python -m lighttbnet`
"""

from lighttbnet import entrypoint

if __name__ == "__main__":
    entrypoint()
