"""Layout I/O: GDSII subset, raster/vector conversion and PNG."""
from .gds import GdsRecord, PolySet, decode_real8, encode_real8, iter_records, read_gds, write_gds
from .png import png_decode, png_encode, png_read, png_write
from .raster import rasterize, simplify_ring, vectorize

__all__ = [
    "GdsRecord",
    "PolySet",
    "decode_real8",
    "encode_real8",
    "iter_records",
    "png_decode",
    "png_encode",
    "png_read",
    "png_write",
    "rasterize",
    "read_gds",
    "simplify_ring",
    "vectorize",
    "write_gds",
]
