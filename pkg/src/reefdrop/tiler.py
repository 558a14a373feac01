"""Regular grid tiling of a frame into patch rectangles."""

from __future__ import annotations

from dataclasses import dataclass

from .core import DEFAULT_GRID, GridSpec
from .errors import GridError


@dataclass(frozen=True)
class PatchRect:
    x: int
    y: int
    w: int
    h: int
    index: int

    @property
    def box(self):
        """(left, upper, right, lower), the crop box convention used by Pillow."""
        return (self.x, self.y, self.x + self.w, self.y + self.h)


def tile(frame_w: int, frame_h: int, grid: GridSpec = DEFAULT_GRID) -> list[PatchRect]:
    """Split a ``frame_w`` x ``frame_h`` frame into equal row-major patches.

    Patch size is ``(frame_w // cols, frame_h // rows)``; leftover pixels on
    the right and bottom edges belong to no patch.
    """
    pw, ph = int(frame_w) // grid.cols, int(frame_h) // grid.rows
    if pw == 0 or ph == 0:
        dim = "width and height" if pw == ph == 0 else ("width" if pw == 0 else "height")
        raise GridError(f"frame {frame_w}x{frame_h} too small for grid {grid}: patch {dim} would be 0")
    return [
        PatchRect(col * pw, row * ph, pw, ph, row * grid.cols + col)
        for row in range(grid.rows)
        for col in range(grid.cols)
    ]


def patch_index(row: int, col: int, grid: GridSpec = DEFAULT_GRID) -> int:
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise GridError(f"cell ({row}, {col}) outside grid {grid}")
    return row * grid.cols + col


def patch_cell(index: int, grid: GridSpec = DEFAULT_GRID) -> tuple[int, int]:
    if not (0 <= index < grid.n_patches):
        raise GridError(f"patch index {index} outside grid {grid}")
    return divmod(index, grid.cols)


def image_size(path) -> tuple[int, int]:
    """Pixel dimensions of an image file (header read only)."""
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def crop_patches(path, grid: GridSpec = DEFAULT_GRID, fmt: str = "JPEG") -> list[bytes]:
    """Encoded bytes of every patch of the image at ``path``, row-major."""
    import io

    from PIL import Image

    out = []
    with Image.open(path) as im:
        im = im.convert("RGB")
        for rect in tile(im.width, im.height, grid):
            buf = io.BytesIO()
            im.crop(rect.box).save(buf, format=fmt)
            out.append(buf.getvalue())
    return out
