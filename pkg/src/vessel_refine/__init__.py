__all__ = [
    "raster",
    "morphnoise",
    "patchmine",
    "tensornet",
    "ganrefine",
    "postproc",
    "evalmetrics",
    "corpus",
    "config",
    "pipeline",
    "storage",
    "errors",
]
