# Tests package for LightTBNet.
