r"""
Cell correspondence between two augmented views
===============================================

Two random crops of the same image share a region. The warp between them
maps feature-grid cells of view 1 into view 2; cells whose image lands
outside view 2 drop out of the overlap mask.
"""
import numpy as np

from sarl import augment as A

rng = np.random.default_rng(12)
src = (128, 128)
p1 = A.sample_view_params(rng, src, 64)
p2 = A.sample_view_params(rng, src, 64)
print("view 1 crop", np.round(p1.crop, 1), "flip", p1.hflip)
print("view 2 crop", np.round(p2.crop, 1), "flip", p2.hflip)

w = A.warp_between(p1, p2)
for res in (8, 4):
    mask = A.overlap_mask(w, (res, res))
    print(f"\n{res}x{res} overlap mask ({mask.sum()} of {res * res} cells):")
    print("\n".join(" ".join("#" if m else "." for m in row) for row in mask))

# %%
# A cell on the 8x8 grid lands in the matching quarter-resolution cell.
for ij in [(0, 0), (3, 4), (7, 7)]:
    hi = A.map_coords(w, ij, (8, 8), (8, 8))
    lo = A.map_coords(w, ij, (8, 8), (4, 4))
    print(ij, "->", hi and hi[0], "at 8x8,", lo and lo[0], "at 4x4")

# %%
# The inverse warp brings coordinates back.
u = rng.random((5, 2))
print("round-trip error", np.abs(w.inverse()(w(u)) - u).max())
