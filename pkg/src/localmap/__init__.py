"""Visual-SLAM local mapping engine: map maintenance, triangulation search,
map-point fusion, Schur-complement local bundle adjustment, keyframe culling,
device-transfer accounting, and a synthetic benchmark harness."""

__version__ = "0.1.0"
