# Makes `src` an importable package for local runs

