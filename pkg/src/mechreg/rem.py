"""Group-averaged kernels and feature maps on periodic pixel grids.

A finite group of permutations acts on flattened (H, W) grids; channels are
acted on diagonally. Averaging a patch-projected base kernel over all pairs
of group elements yields an operator-valued kernel that commutes with the
group action, and the matching feature map is a scaled periodic
cross-correlation. Subgroups selected by a stride implement downsampling.

Grid points are flat vectors of length channels * H * W in channel-major,
row-major order. The base kernel is evaluated on packed patch coordinates
(the pixels selected by the patch mask, per channel); for kernels that
vanish on zero coordinates this equals evaluating on the zero-padded
projection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UnsupportedKernel
from .kernels import SCALAR_FAMILIES, ActivationSpec, KernelSpec, scalar_gram

REM_MODES = ("equivariant", "invariant")


def _translation_perm(h, w, dy, dx):
    """Index permutation of the content shift (i, j) -> (i + dy, j + dx)."""
    idx = np.arange(h * w)
    i, j = divmod(idx, w)
    return ((i - dy) % h) * w + (j - dx) % w


def _compose(outer, inner):
    """Permutation of x -> outer(inner(x))."""
    return inner[outer]


def _invert(perm):
    return np.argsort(perm)


@dataclass(frozen=True)
class GroupSpec:
    """A finite group of index permutations of a periodic (H, W) grid.

    Construction verifies the group table: closure under composition,
    presence of the identity, and an inverse for every element. Every
    permutation is unitary on the grid vector space. stride records how a
    translation subgroup was selected; the full group has stride (1, 1).
    """

    grid: tuple
    elements: tuple
    stride: tuple = (1, 1)

    def __post_init__(self):
        h, w = self.grid
        if h < 1 or w < 1:
            raise ValueError("grid dimensions must be positive")
        sy, sx = self.stride
        if sy < 1 or sx < 1:
            raise ValueError("stride entries must be positive")
        if h % sy or w % sx:
            raise ValueError(f"stride {self.stride} does not divide grid {self.grid}")
        n = h * w
        elems = tuple(np.asarray(e, dtype=int) for e in self.elements)
        if not elems:
            raise ValueError("a group needs at least one element")
        for e in elems:
            if e.shape != (n,) or not np.array_equal(np.sort(e), np.arange(n)):
                raise ValueError("each element must be a permutation of the grid indices")
        table = {e.tobytes(): i for i, e in enumerate(elems)}
        if len(table) != len(elems):
            raise ValueError("duplicate group elements")
        if np.arange(n).tobytes() not in table:
            raise ValueError("the identity permutation is missing")
        for a in elems:
            if _invert(a).tobytes() not in table:
                raise ValueError("an element has no inverse in the list")
            for b in elems:
                if _compose(a, b).tobytes() not in table:
                    raise ValueError("the element list is not closed under composition")
        object.__setattr__(self, "grid", (int(h), int(w)))
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "stride", (int(sy), int(sx)))

    @property
    def size(self):
        return len(self.elements)

    @property
    def pixels(self):
        return self.grid[0] * self.grid[1]


def translation_group(grid, stride=(1, 1)):
    """All periodic translations of the grid with offsets multiple of stride."""
    h, w = grid
    sy, sx = stride
    if h % sy or w % sx:
        raise ValueError(f"stride {stride} does not divide grid {grid}")
    elems = [
        _translation_perm(h, w, dy, dx)
        for dy in range(0, h, sy)
        for dx in range(0, w, sx)
    ]
    return GroupSpec(grid=(h, w), elements=tuple(elems), stride=(sy, sx))


def translation_offsets(group):
    """(dy, dx) per element; raises if some element is not a translation."""
    h, w = group.grid
    offsets = []
    for perm in group.elements:
        i0, j0 = divmod(int(perm[0]), w)
        dy, dx = (-i0) % h, (-j0) % w
        if not np.array_equal(perm, _translation_perm(h, w, dy, dx)):
            raise ValueError("group contains a non-translation element")
        offsets.append((dy, dx))
    return np.array(offsets, dtype=int)


def subgroup(group, stride):
    """Translations of `group` whose offsets are multiples of the finer stride.

    The stride is relative, so subgroup(subgroup(g, (2, 2)), (2, 2)) selects
    the same elements as subgroup(g, (4, 4)).
    """
    sy, sx = group.stride[0] * stride[0], group.stride[1] * stride[1]
    h, w = group.grid
    if h % sy or w % sx:
        raise ValueError(f"stride {(sy, sx)} does not divide grid {group.grid}")
    offsets = translation_offsets(group)
    keep = [
        e
        for e, (dy, dx) in zip(group.elements, offsets)
        if dy % sy == 0 and dx % sx == 0
    ]
    return GroupSpec(grid=group.grid, elements=tuple(keep), stride=(sy, sx))


def apply_element(group, index, x):
    """Act with one group element; channels (any leading axes) are diagonal.

    Accepts arrays whose last axis is a multiple of H*W (flat layout) or
    whose last two axes are (H, W) (image layout).
    """
    perm = group.elements[index]
    n = group.pixels
    arr = np.asarray(x, dtype=float)
    if arr.ndim >= 2 and arr.shape[-2:] == group.grid:
        flat = arr.reshape(arr.shape[:-2] + (n,))
        return flat[..., perm].reshape(arr.shape)
    if arr.shape[-1] % n == 0:
        parts = arr.reshape(arr.shape[:-1] + (arr.shape[-1] // n, n))
        return parts[..., perm].reshape(arr.shape)
    raise DimensionMismatch(
        f"last axis {arr.shape[-1]} is not a multiple of the {n}-pixel grid"
    )


def _as_pixel_index(mask, n, name):
    idx = np.asarray(mask, dtype=int).reshape(-1)
    if idx.size == 0:
        raise ValueError(f"{name} mask must select at least one pixel")
    if len(np.unique(idx)) != idx.size:
        raise ValueError(f"{name} mask has repeated pixels")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"{name} mask indices must lie in [0, {n})")
    return np.sort(idx)


@dataclass(frozen=True)
class RemSpec:
    """Patch-projected base kernel averaged over a permutation group.

    patch and output_mask are flat pixel index sets; as projections (zeroing
    the unselected pixels) both are idempotent and act diagonally over
    channels. The base kernel sees packed patch coordinates of dimension
    channels[0] * len(patch). mode "equivariant" builds the operator-valued
    kernel E[g^T R K(P g x, P g' x') R g']; mode "invariant" builds the
    scalar kernel E[k(P g x, P g' x')].
    """

    group: GroupSpec
    patch: np.ndarray
    output_mask: np.ndarray
    base_kernel: KernelSpec
    channels: tuple = (1, 1)
    activation: ActivationSpec | None = None
    mode: str = "equivariant"

    def __post_init__(self):
        n = self.group.pixels
        object.__setattr__(self, "patch", _as_pixel_index(self.patch, n, "patch"))
        object.__setattr__(
            self, "output_mask", _as_pixel_index(self.output_mask, n, "output")
        )
        if self.base_kernel.family not in SCALAR_FAMILIES:
            raise UnsupportedKernel("the base kernel must be a scalar family")
        c1, c2 = self.channels
        if c1 < 1 or c2 < 1:
            raise ValueError("channel counts must be positive")
        if self.mode not in REM_MODES:
            raise ValueError(f"mode must be one of {REM_MODES}")
        object.__setattr__(self, "channels", (int(c1), int(c2)))

    @property
    def grid(self):
        return self.group.grid

    @property
    def dim_in(self):
        return self.channels[0] * self.group.pixels

    @property
    def dim_out(self):
        return self.channels[1] * self.group.pixels

    # hooks consumed by the kernels module for KernelSpec(family="rem")

    def block_gram(self, a, b):
        return _block_gram(self, a, b)

    def quad_grad(self, q, p):
        return _quad_grad(self, q, p)

    def invariant_gram(self, a, b):
        a = _check_points(self, a)
        b = a if b is a else _check_points(self, b)
        u = _packed_all(self, a)
        v = u if b is a else _packed_all(self, b)
        size = self.group.size
        k = _base_values(
            self, u.reshape(size * len(a), -1), v.reshape(size * len(b), -1)
        )
        return k.reshape(size, len(a), size, len(b)).mean(axis=(0, 2))


def rem_kernel(spec, nugget=0.0, output_dim=None):
    """Wrap a RemSpec as a KernelSpec usable by gram, ridge fits, and flows."""
    if spec.mode == "equivariant":
        dim = spec.dim_out
        if output_dim is not None and output_dim != dim:
            raise DimensionMismatch(
                f"equivariant output dimension is {dim}, got {output_dim}"
            )
    else:
        dim = 1 if output_dim is None else output_dim
    return KernelSpec(family="rem", output_dim=dim, nugget=nugget, rem=spec)


def _check_points(spec, pts):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != spec.dim_in:
        raise DimensionMismatch(
            f"points must be rows of {spec.dim_in} values "
            f"({spec.channels[0]} channels on a {spec.grid} grid), got {pts.shape}"
        )
    return pts


def _as_grid_point(spec, x, name):
    """Flatten (c1, H, W), (H, W), or flat input to a (dim_in,) vector."""
    arr = np.asarray(x, dtype=float)
    c1 = spec.channels[0]
    if arr.shape == spec.grid and c1 == 1:
        return arr.reshape(-1)
    if arr.shape == (c1,) + spec.grid:
        return arr.reshape(-1)
    if arr.shape == (spec.dim_in,):
        return arr
    raise DimensionMismatch(
        f"{name} must be a {(c1,) + spec.grid} image or a flat vector of "
        f"{spec.dim_in} values, got shape {arr.shape}"
    )


def _packed_all(spec, pts):
    """Packed patches of every translate: (|G|, N, c1 * |patch|)."""
    n = spec.group.pixels
    c1 = spec.channels[0]
    per_channel = pts.reshape(len(pts), c1, n)
    idx = np.stack([perm[spec.patch] for perm in spec.group.elements])
    gathered = per_channel[:, :, idx]
    return np.moveaxis(gathered, 2, 0).reshape(
        spec.group.size, len(pts), c1 * len(spec.patch)
    )


def _base_values(spec, u, v):
    """Pointwise base kernel values; coincident arguments gain the nugget."""
    k = scalar_gram(spec.base_kernel, u, v)
    r = spec.base_kernel.nugget
    if r > 0:
        same = (u[:, None, :] == v[None, :, :]).all(axis=-1)
        k = k + r * same
    return k


def _output_rows(spec):
    """Pixel row of each (element, output-mask slot) placement: (|G|, |R|)."""
    return np.stack([perm[spec.output_mask] for perm in spec.group.elements])


def _accumulate_block(spec, kmat, rows, cols, scale, pairs=None):
    """Sum k * (placement of the output mask) into an (HW, HW) pixel block."""
    n = spec.group.pixels
    block = np.zeros((n, n))
    if pairs is None:
        for t in range(rows.shape[1]):
            np.add.at(block, (rows[:, t][:, None], cols[:, t][None, :]), kmat)
    else:
        for t in range(rows.shape[1]):
            np.add.at(block, (rows[pairs[:, 0], t], cols[pairs[:, 1], t]), kmat)
    return block * scale


def rem_kernel_eval(spec, x, xp, mc_pairs=None, seed=0):
    """One operator block C(x, x') of shape (c2 * H * W, c2 * H * W).

    The default is the exact average over all pairs of group elements;
    mc_pairs switches to a Monte-Carlo average over that many uniformly
    sampled pairs drawn with the given seed.
    """
    if spec.mode != "equivariant":
        raise UnsupportedKernel("rem_kernel_eval needs an equivariant-mode spec")
    xf = _as_grid_point(spec, x, "x")
    yf = _as_grid_point(spec, xp, "x'")
    u = _packed_all(spec, xf[None, :])[:, 0, :]
    v = _packed_all(spec, yf[None, :])[:, 0, :]
    rows = _output_rows(spec)
    size = spec.group.size
    kmat = _base_values(spec, u, v)
    if mc_pairs is None:
        block = _accumulate_block(spec, kmat, rows, rows, scale=1.0 / size**2)
    else:
        if mc_pairs < 1:
            raise ValueError("mc_pairs must be a positive integer")
        rng = np.random.default_rng(seed)
        pairs = rng.integers(0, size, size=(int(mc_pairs), 2))
        kvals = kmat[pairs[:, 0], pairs[:, 1]]
        block = _accumulate_block(
            spec, kvals, rows, rows, scale=1.0 / len(pairs), pairs=pairs
        )
    return np.kron(np.eye(spec.channels[1]), block)


def _block_gram(spec, a, b):
    """Stacked blocks C(a_i, b_j): (N * dim_out, M * dim_out)."""
    if spec.mode != "equivariant":
        raise UnsupportedKernel("block grams need an equivariant-mode spec")
    a = _check_points(spec, a)
    b = _check_points(spec, b)
    u = _packed_all(spec, a)
    v = _packed_all(spec, b)
    size = spec.group.size
    kmat = _base_values(
        spec, u.reshape(size * len(a), -1), v.reshape(size * len(b), -1)
    ).reshape(size, len(a), size, len(b))
    rows = _output_rows(spec)
    c2 = spec.channels[1]
    n = spec.group.pixels
    d = c2 * n
    out = np.zeros((len(a) * d, len(b) * d))
    eye = np.eye(c2)
    for i in range(len(a)):
        for j in range(len(b)):
            block = _accumulate_block(
                spec, kmat[:, i, :, j], rows, rows, scale=1.0 / size**2
            )
            out[i * d : (i + 1) * d, j * d : (j + 1) * d] = np.kron(eye, block)
    return out


def _grad1_weighted(kernel, u, v, wmat):
    """Rows sum_j w_ij * d/du_i k(u_i, v_j) for a scalar kernel family."""
    if kernel.family == "gaussian":
        k = scalar_gram(kernel, u, v)
        g = wmat * k
        return (-2.0 / kernel.bandwidth**2) * (g.sum(axis=1)[:, None] * u - g @ v)
    if kernel.family == "linear":
        return wmat @ v
    if kernel.family == "activation":
        act = kernel.activation
        if act.nonlinearity == "relu":
            raise UnsupportedKernel(
                "relu activation kernels are not differentiable; use softplus_clamped"
            )
        return act.deriv(u) * (wmat @ act.value(v))
    raise UnsupportedKernel(f"no analytic gradient for family {kernel.family!r}")


def _quad_grad(spec, q, p):
    """d/dq of sum_ij p_i^T C(q_i, q_j) p_j; the coincidence nugget is constant."""
    if spec.mode != "equivariant":
        raise UnsupportedKernel("invariant rem kernels have no position gradient hook")
    q = _check_points(spec, q)
    p = np.asarray(p, dtype=float)
    if p.shape != (len(q), spec.dim_out):
        raise DimensionMismatch(
            f"momenta must have shape {(len(q), spec.dim_out)}, got {p.shape}"
        )
    if spec.channels[0] != spec.channels[1]:
        raise UnsupportedKernel(
            "position gradients need matching input and output channel counts"
        )
    size = spec.group.size
    n_pts = len(q)
    npix = spec.group.pixels
    c = spec.channels[0]
    u = _packed_all(spec, q).reshape(size * n_pts, -1)

    rows = _output_rows(spec)
    per_channel = p.reshape(n_pts, c, npix)
    gathered = per_channel[:, :, rows]
    s = np.moveaxis(gathered, 2, 0).reshape(size * n_pts, c * len(spec.output_mask))
    coupling = s @ s.T

    du = (2.0 / size**2) * _grad1_weighted(spec.base_kernel, u, u, coupling)
    du = du.reshape(size, n_pts, c, len(spec.patch))
    grad = np.zeros((n_pts, c, npix))
    for e, perm in enumerate(spec.group.elements):
        grad[:, :, perm[spec.patch]] += du[e]
    return grad.reshape(n_pts, c * npix)


def rem_feature_apply(spec, w, x):
    """E_G[g^T (w phibar(P g x))] with phibar(u) = (a(u), 1).

    w maps the packed patch plus a bias slot to the packed output mask:
    shape (c2 * |output_mask|, c1 * |patch| + 1). The activation is taken
    from spec.activation, falling back to an activation-family base kernel.
    """
    act = spec.activation
    if act is None:
        if spec.base_kernel.family == "activation":
            act = spec.base_kernel.activation
        else:
            raise UnsupportedKernel(
                "rem_feature_apply needs spec.activation (or an activation base kernel)"
            )
    arr = np.asarray(x, dtype=float)
    xf = _as_grid_point(spec, x, "x")
    c1, c2 = spec.channels
    n_r = len(spec.output_mask)
    w = np.asarray(w, dtype=float)
    if w.shape != (c2 * n_r, c1 * len(spec.patch) + 1):
        raise DimensionMismatch(
            f"w must have shape {(c2 * n_r, c1 * len(spec.patch) + 1)}, got {w.shape}"
        )
    u = _packed_all(spec, xf[None, :])[:, 0, :]
    feats = np.concatenate([act.value(u), np.ones((spec.group.size, 1))], axis=1)
    vals = feats @ w.T
    out = np.zeros((c2, spec.group.pixels))
    for e, perm in enumerate(spec.group.elements):
        out[:, perm[spec.output_mask]] += vals[e].reshape(c2, n_r)
    out /= spec.group.size
    if arr.ndim == 2 and arr.shape == spec.grid:
        return out.reshape(spec.grid) if c2 == 1 else out.reshape((c2,) + spec.grid)
    if arr.ndim == 3:
        return out.reshape((c2,) + spec.grid)
    return out.reshape(-1)


def pack_patch(spec, x, element=0):
    """Packed patch coordinates of P g x: (c1 * |patch|,)."""
    xf = _as_grid_point(spec, x, "x")
    return _packed_all(spec, xf[None, :])[element, 0, :]


def downsample_range(spec):
    """Index map from the union of translated output masks to a coarse grid.

    Entry (a, b) is the flat fine-grid pixel of coarse cell (a, b). Requires
    the group to be a translation subgroup whose translated output masks
    cover exactly (H/sy) * (W/sx) distinct pixels, so the identification is
    a bijection; channels extend the map diagonally.
    """
    group = spec.group
    h, w = group.grid
    sy, sx = group.stride
    offsets = translation_offsets(group)
    if len(group.elements) != (h // sy) * (w // sx):
        raise ValueError("group is not the full translation subgroup of its stride")
    union = set()
    for dy, dx in offsets:
        for t in spec.output_mask:
            i, j = divmod(int(t), w)
            union.add(((i + dy) % h) * w + (j + dx) % w)
    cells = (h // sy) * (w // sx)
    if len(union) != cells:
        raise ValueError(
            f"translated output masks cover {len(union)} pixels; a bijection "
            f"onto the {cells}-cell coarse grid needs exactly {cells}"
        )
    i0, j0 = divmod(int(spec.output_mask[0]), w)
    out = np.empty((h // sy, w // sx), dtype=int)
    for a in range(h // sy):
        for b in range(w // sx):
            pix = ((i0 + a * sy) % h) * w + (j0 + b * sx) % w
            if pix not in union:
                raise ValueError("translated output masks do not tile a coarse lattice")
            out[a, b] = pix
    return out


def read_grid_csv(path):
    """Read grid images: '# h=H w=W channels=C' header, one image per line.

    Returns (images, (h, w), channels) with images of shape (N, c * h * w)
    in channel-major, row-major pixel order.
    """
    header = None
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None and "h=" in line:
                    parts = dict(
                        tok.split("=") for tok in line.lstrip("# ").split() if "=" in tok
                    )
                    header = (int(parts["h"]), int(parts["w"]), int(parts["channels"]))
                continue
            rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise ValueError(f"{path} is missing the '# h=.. w=.. channels=..' header")
    h, w, c = header
    images = np.array(rows, dtype=float)
    if images.size and images.shape[1] != c * h * w:
        raise DimensionMismatch(
            f"rows of {path} have {images.shape[1]} values, expected {c * h * w}"
        )
    return images.reshape(-1, c * h * w), (h, w), c


def write_grid_csv(path, images, grid, channels=1):
    """Write grid images in the format understood by read_grid_csv."""
    h, w = grid
    images = np.asarray(images, dtype=float).reshape(len(images), -1)
    if images.shape[1] != channels * h * w:
        raise DimensionMismatch(
            f"images have {images.shape[1]} values per row, expected {channels * h * w}"
        )
    with open(path, "w", newline="") as fh:
        fh.write(f"# h={h} w={w} channels={channels}\n")
        writer = csv.writer(fh)
        for row in images:
            writer.writerow([repr(float(v)) for v in row])
