"""The multi-level predictive network.

Levels are rectangular grids of units.  Level 0 units own pixel tiles of
the input frame; each higher level predicts the hidden states of the
level below it.  Wiring:

* fan-in: each unit maps to the superior cell covering it (largest
  interval overlap per axis, ties to the lower index), so non-integer
  grid ratios such as 4x3 -> 3x2 still wire completely;
* lateral: 4-neighbourhood inside a level (geometric tile adjacency on a
  foveated level 0), no wraparound;
* context: every unit reads the previous-step hidden states of itself,
  its lateral neighbours, its superior, and the topmost unit when
  broadcast is enabled (duplicates removed, the topmost never receives
  its own broadcast).

All cross-unit reads hit the previous-step hidden buffer, so the update
is a synchronous map: unit order inside a step cannot matter.  Within a
step each unit first trains its pending prediction against the signal
that just arrived, then runs forward with the updated weights.

For speed, units with identical shapes are grouped into buckets and
advanced with the stacked math in :mod:`pvm.numerics`; semantics are
identical to stepping :class:`pvm.unit.PvmUnit` objects one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import (MlpGradients, MlpParams, init_mlp,
                       mlp_backward_stack, mlp_forward_stack, sgd_step,
                       sigmoid)
from .unit import DEFAULT_TAU


class NumericError(RuntimeError):
    """A non-finite value appeared where training math expects finite ones."""


@dataclass(frozen=True)
class FoveaSpec:
    """Central level-0 region whose units are split into smaller ones.

    region is (x, y, w, h) in level-0 unit-cell coordinates; factor is the
    per-axis split count (fx, fy), so every cell in the region becomes
    fx*fy units owning proportionally smaller pixel tiles.
    """

    region: tuple[int, int, int, int]
    factor: tuple[int, int]


@dataclass(frozen=True)
class HierarchySpec:
    """Static description of the network layout."""

    level_dims: tuple[tuple[int, int], ...]   # (cols, rows) per level, bottom first
    hidden_size: int = 5
    tile_size: tuple[int, int] = (2, 2)       # (w, h) pixels per level-0 unit
    fovea: Optional[FoveaSpec] = None
    topmost_broadcast: bool = True

    @property
    def frame_size(self) -> tuple[int, int]:
        """(width, height) of the input frame in pixels."""
        cols, rows = self.level_dims[0]
        return cols * self.tile_size[0], rows * self.tile_size[1]

    def validate(self) -> None:
        if not self.level_dims:
            raise ValueError("at least one level is required")
        counts = []
        for cols, rows in self.level_dims:
            if cols < 1 or rows < 1:
                raise ValueError(f"invalid level dims {(cols, rows)}")
            counts.append(cols * rows)
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"unit counts must strictly decrease, got {counts}")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        tw, th = self.tile_size
        if tw < 1 or th < 1:
            raise ValueError("tile_size must be positive")
        if self.topmost_broadcast and counts[-1] != 1:
            raise ValueError("topmost broadcast requires a single top unit")
        if self.fovea is not None:
            x, y, w, h = self.fovea.region
            cols, rows = self.level_dims[0]
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > cols or y + h > rows:
                raise ValueError(f"fovea region {self.fovea.region} outside "
                                 f"level-0 grid {(cols, rows)}")
            fx, fy = self.fovea.factor
            if fx < 1 or fy < 1:
                raise ValueError("fovea factor must be >= 1 per axis")
            if tw % fx or th % fy:
                raise ValueError(f"fovea factor {(fx, fy)} must divide the "
                                 f"tile size {(tw, th)}")


@dataclass(frozen=True)
class UnitInfo:
    """Immutable wiring record of one unit."""

    uid: int
    level: int
    rect: Optional[tuple[int, int, int, int]]  # level-0 pixel rect (x, y, w, h)
    cell: tuple[int, int]                      # grid cell (col, row); original cell for split units
    signal_dim: int
    parent: Optional[int]
    children: tuple[int, ...]
    context_sources: tuple[int, ...]


@dataclass
class ErrorMap:
    """Per-unit squared prediction errors for one step.

    unit_losses holds one array per level: levels >= 1 are (rows, cols)
    grids; level 0 is a flat per-unit vector (its grid can be ragged when
    a fovea is applied).  pixels is the level-0 error resolved per pixel,
    channels summed.
    """

    pixels: np.ndarray
    unit_losses: tuple[np.ndarray, ...]


@dataclass
class StepResult:
    prediction: np.ndarray   # the frame predicted for the NEXT input
    errmap: ErrorMap
    mse_image: float
    mse_all: float


@dataclass
class _Bucket:
    """A group of units with identical array shapes, stepped together."""

    level: int
    ids: np.ndarray                 # (n,) unit ids
    params: MlpParams               # stacked
    ctx_idx: np.ndarray             # (n, m_ctx) unit ids providing context
    pix_idx: Optional[np.ndarray]   # level 0: (n, s) indices into frame.ravel()
    pixel_pos: Optional[np.ndarray]  # level 0: (n, s/3) pixel positions y*W+x
    child_idx: Optional[np.ndarray]  # level >= 1: (n, m) child unit ids
    signal_prev: np.ndarray = field(default=None)  # type: ignore[assignment]
    integral: np.ndarray = field(default=None)     # type: ignore[assignment]
    pending: np.ndarray = field(default=None)      # type: ignore[assignment]
    input_prev: np.ndarray = field(default=None)   # type: ignore[assignment]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def signal_dim(self) -> int:
        return self.params.out_dim


def _coverage_map(n_child: int, n_parent: int) -> list[int]:
    """Child index -> parent index with maximal interval overlap.

    Intervals are compared in integer arithmetic (common denominator
    n_child * n_parent), so ties are exact and resolve to the lower index.
    """
    out = []
    for i in range(n_child):
        lo, hi = i * n_parent, (i + 1) * n_parent
        best_p, best_ov = 0, -1
        for p in range(n_parent):
            plo, phi = p * n_child, (p + 1) * n_child
            ov = min(hi, phi) - max(lo, plo)
            if ov > best_ov:
                best_p, best_ov = p, ov
        out.append(best_p)
    return out


class Hierarchy:
    """The runtime network: wiring, parameters and recurrent state."""

    def __init__(self, spec: HierarchySpec, seed: int = 0,
                 tau: float = DEFAULT_TAU):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        self.tau = float(tau)
        self.frames_seen = 0
        self._build_wiring()
        self._build_buckets(np.random.default_rng(self.seed))

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------

    def _build_wiring(self) -> None:
        spec = self.spec
        h = spec.hidden_size
        W, H = spec.frame_size
        tw, th = spec.tile_size
        cols0, rows0 = spec.level_dims[0]

        # --- level-0 units: pixel rects, split inside the fovea ---------
        rects: list[tuple[int, int, int, int]] = []
        cells: list[tuple[int, int]] = []
        fov = spec.fovea
        for r in range(rows0):
            for c in range(cols0):
                x0, y0 = c * tw, r * th
                in_fovea = (fov is not None
                            and fov.region[0] <= c < fov.region[0] + fov.region[2]
                            and fov.region[1] <= r < fov.region[1] + fov.region[3])
                if in_fovea:
                    fx, fy = fov.factor
                    sw, sh = tw // fx, th // fy
                    for sr in range(fy):
                        for sc in range(fx):
                            rects.append((x0 + sc * sw, y0 + sr * sh, sw, sh))
                            cells.append((c, r))
                else:
                    rects.append((x0, y0, tw, th))
                    cells.append((c, r))

        n0 = len(rects)
        level_offsets = [0, n0]
        for cols, rows in spec.level_dims[1:]:
            level_offsets.append(level_offsets[-1] + cols * rows)
        n_total = level_offsets[-1]
        self.level_offsets = level_offsets
        self.n_levels = len(spec.level_dims)

        # pixel owner map; rects partition the frame by construction
        owner = np.full((H, W), -1, dtype=np.int64)
        for uid, (x0, y0, w, hgt) in enumerate(rects):
            owner[y0:y0 + hgt, x0:x0 + w] = uid
        self._owner = owner

        # --- lateral neighbours ------------------------------------------
        lateral: list[set[int]] = [set() for _ in range(n_total)]
        for a, b in zip(owner[:, :-1].ravel(), owner[:, 1:].ravel()):
            if a != b:
                lateral[a].add(b)
                lateral[b].add(a)
        for a, b in zip(owner[:-1, :].ravel(), owner[1:, :].ravel()):
            if a != b:
                lateral[a].add(b)
                lateral[b].add(a)
        for lvl in range(1, self.n_levels):
            cols, rows = spec.level_dims[lvl]
            base = level_offsets[lvl]
            for r in range(rows):
                for c in range(cols):
                    uid = base + r * cols + c
                    if c + 1 < cols:
                        lateral[uid].add(uid + 1)
                        lateral[uid + 1].add(uid)
                    if r + 1 < rows:
                        lateral[uid].add(uid + cols)
                        lateral[uid + cols].add(uid)

        # --- parents -------------------------------------------------------
        parent: list[Optional[int]] = [None] * n_total
        for lvl in range(self.n_levels - 1):
            ccols, crows = spec.level_dims[lvl]
            pcols, prows = spec.level_dims[lvl + 1]
            cov_c = _coverage_map(ccols, pcols)
            cov_r = _coverage_map(crows, prows)
            pbase = level_offsets[lvl + 1]
            if lvl == 0:
                for uid, (c, r) in enumerate(cells):
                    parent[uid] = pbase + cov_r[r] * pcols + cov_c[c]
            else:
                base = level_offsets[lvl]
                for r in range(crows):
                    for c in range(ccols):
                        parent[base + r * ccols + c] = \
                            pbase + cov_r[r] * pcols + cov_c[c]

        children: list[list[int]] = [[] for _ in range(n_total)]
        for uid, p in enumerate(parent):
            if p is not None:
                children[p].append(uid)
        for lvl in range(1, self.n_levels):
            base, end = level_offsets[lvl], level_offsets[lvl + 1]
            for uid in range(base, end):
                if not children[uid]:
                    raise ValueError(
                        f"level dims leave unit {uid} (level {lvl}) childless")

        # --- context sources ------------------------------------------------
        top = n_total - 1
        contexts: list[tuple[int, ...]] = []
        for uid in range(n_total):
            srcs = [uid, *sorted(lateral[uid])]
            if parent[uid] is not None:
                srcs.append(parent[uid])
            if spec.topmost_broadcast and uid != top:
                srcs.append(top)
            seen: set[int] = set()
            dedup = [s for s in srcs if not (s in seen or seen.add(s))]
            contexts.append(tuple(dedup))

        # --- assemble UnitInfo records ---------------------------------------
        infos: list[UnitInfo] = []
        for uid in range(n_total):
            if uid < n0:
                x0, y0, w, hgt = rects[uid]
                lvl, rect, cell = 0, rects[uid], cells[uid]
                sig = w * hgt * 3
            else:
                lvl = next(l for l in range(1, self.n_levels)
                           if level_offsets[l] <= uid < level_offsets[l + 1])
                cols, _ = spec.level_dims[lvl]
                k = uid - level_offsets[lvl]
                rect, cell = None, (k % cols, k // cols)
                sig = h * len(children[uid])
            infos.append(UnitInfo(uid=uid, level=lvl, rect=rect, cell=cell,
                                  signal_dim=sig, parent=parent[uid],
                                  children=tuple(sorted(children[uid])),
                                  context_sources=contexts[uid]))
        self.units: tuple[UnitInfo, ...] = tuple(infos)
        self.unit_count = n_total

    def _build_buckets(self, rng: np.random.Generator) -> None:
        spec = self.spec
        h = spec.hidden_size
        W, _ = spec.frame_size

        # Parameters are drawn per unit, in unit-id order, so they depend
        # only on (spec, seed), never on how units are grouped.
        per_unit: list[MlpParams] = []
        for u in self.units:
            in_dim = 4 * u.signal_dim + h * len(u.context_sources)
            per_unit.append(init_mlp(in_dim, h, u.signal_dim, rng))

        groups: dict[tuple, list[int]] = {}
        for u in self.units:
            if u.level == 0:
                key = (0, u.rect[2], u.rect[3], len(u.context_sources))
            else:
                key = (u.level, len(u.children), len(u.context_sources))
            groups.setdefault(key, []).append(u.uid)

        buckets: list[_Bucket] = []
        for key in sorted(groups):
            ids = np.array(groups[key], dtype=np.int64)
            params = MlpParams(
                w_h=np.stack([per_unit[i].w_h for i in ids]),
                b_h=np.stack([per_unit[i].b_h for i in ids]),
                w_p=np.stack([per_unit[i].w_p for i in ids]),
                b_p=np.stack([per_unit[i].b_p for i in ids]),
            )
            ctx_idx = np.array([self.units[i].context_sources for i in ids],
                               dtype=np.int64)
            pix_idx = pixel_pos = child_idx = None
            if key[0] == 0:
                pix = []
                for i in ids:
                    x0, y0, w, hgt = self.units[i].rect
                    yy, xx = np.mgrid[y0:y0 + hgt, x0:x0 + w]
                    base = (yy * W + xx).ravel()
                    pix.append((base[:, None] * 3 + np.arange(3)).ravel())
                pix_idx = np.stack(pix)
                pixel_pos = pix_idx[:, ::3] // 3
            else:
                child_idx = np.array([self.units[i].children for i in ids],
                                     dtype=np.int64)
            b = _Bucket(level=key[0], ids=ids, params=params, ctx_idx=ctx_idx,
                        pix_idx=pix_idx, pixel_pos=pixel_pos,
                        child_idx=child_idx)
            sig = b.signal_dim
            b.signal_prev = np.full((b.n, sig), 0.5)
            b.integral = np.full((b.n, sig), 0.5)
            hidden0 = sigmoid(b.params.b_h)
            b.pending = sigmoid(
                np.einsum("noh,nh->no", b.params.w_p, hidden0) + b.params.b_p)
            b.input_prev = np.zeros((b.n, b.params.in_dim))
            buckets.append(b)
        self.buckets = buckets

        self.hidden_prev = np.empty((self.unit_count, h))
        for b in buckets:
            self.hidden_prev[b.ids] = sigmoid(b.params.b_h)
        self._slot = {}
        for bi, b in enumerate(buckets):
            for si, uid in enumerate(b.ids):
                self._slot[int(uid)] = (bi, si)
        self._total_signal_dim = sum(u.signal_dim for u in self.units)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def level_ids(self, level: int) -> np.ndarray:
        return np.arange(self.level_offsets[level], self.level_offsets[level + 1])

    def owner_map(self) -> np.ndarray:
        """(H, W) map of which level-0 unit owns each pixel."""
        return self._owner.copy()

    def unit_params(self, uid: int) -> MlpParams:
        """Copy of one unit's parameter blocks."""
        bi, si = self._slot[uid]
        p = self.buckets[bi].params
        return MlpParams(p.w_h[si].copy(), p.b_h[si].copy(),
                         p.w_p[si].copy(), p.b_p[si].copy())

    def unit_state(self, uid: int) -> dict:
        """Copies of one unit's recurrent state vectors."""
        bi, si = self._slot[uid]
        b = self.buckets[bi]
        return {
            "signal_prev": b.signal_prev[si].copy(),
            "integral": b.integral[si].copy(),
            "pending": b.pending[si].copy(),
            "input_prev": b.input_prev[si].copy(),
            "hidden": self.hidden_prev[uid].copy(),
        }

    # ------------------------------------------------------------------
    # Level-0 frame views (motion compensation hooks)
    # ------------------------------------------------------------------

    def _assemble(self, attr: str) -> np.ndarray:
        W, H = self.spec.frame_size
        flat = np.empty(H * W * 3)
        for b in self.buckets:
            if b.level == 0:
                flat[b.pix_idx] = getattr(b, attr)
        return flat.reshape(H, W, 3)

    def _scatter(self, attr: str, frame: np.ndarray) -> None:
        W, H = self.spec.frame_size
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (H, W, 3):
            raise ValueError(f"frame has shape {frame.shape}, expected {(H, W, 3)}")
        flat = np.ascontiguousarray(frame).ravel()
        for b in self.buckets:
            if b.level == 0:
                setattr(b, attr, flat[b.pix_idx])

    def pending_frame(self) -> np.ndarray:
        """Level-0 pending predictions assembled into a full frame."""
        return self._assemble("pending")

    def set_pending_frame(self, frame: np.ndarray) -> None:
        self._scatter("pending", frame)

    def signal_memory_frame(self) -> np.ndarray:
        """Level-0 previous-signal memory assembled into a full frame."""
        return self._assemble("signal_prev")

    def set_signal_memory_frame(self, frame: np.ndarray) -> None:
        self._scatter("signal_prev", frame)

    # ------------------------------------------------------------------
    # Stepping
    # ------------------------------------------------------------------

    def step(self, frame: np.ndarray, train: bool = False, rate: float = 0.01,
             train_frame: Optional[np.ndarray] = None) -> StepResult:
        """Advance the whole network by one input frame.

        Per unit: the pending prediction is scored (and optionally trained)
        against the signal that just arrived, then the forward pass runs
        with the updated weights, reading previous-step hidden states.
        ``train_frame``, when given, replaces the level-0 training targets
        (used for motion-compensated learning); scoring always uses the
        real frame.
        """
        W, H = self.spec.frame_size
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (H, W, 3):
            raise ValueError(f"frame has shape {frame.shape}, expected {(H, W, 3)}")
        flat = np.ascontiguousarray(frame).ravel()
        train_flat = None
        if train_frame is not None:
            train_frame = np.asarray(train_frame, dtype=np.float64)
            if train_frame.shape != (H, W, 3):
                raise ValueError("train_frame size mismatch")
            train_flat = np.ascontiguousarray(train_frame).ravel()

        losses = np.empty(self.unit_count)
        err_pix = np.zeros(H * W)
        hidden_next = np.empty_like(self.hidden_prev)
        can_train = train and self.frames_seen > 0
        tau = self.tau

        for b in self.buckets:
            if b.level == 0:
                sig = flat[b.pix_idx]
            else:
                sig = self.hidden_prev[b.child_idx].reshape(b.n, -1)
            sqerr = (b.pending - sig) ** 2
            losses[b.ids] = sqerr.sum(axis=1)
            if b.level == 0:
                err_pix[b.pixel_pos] = sqerr.reshape(b.n, -1, 3).sum(axis=2)

            if can_train:
                if b.level == 0 and train_flat is not None:
                    target = train_flat[b.pix_idx]
                else:
                    target = sig
                grads, _ = mlp_backward_stack(b.params, b.input_prev, target)
                sgd_step(b.params, grads, rate)

            ctx = self.hidden_prev[b.ctx_idx].reshape(b.n, -1)
            derivative = 0.5 + (sig - b.signal_prev) / 2.0
            integral = tau * b.integral + (1.0 - tau) * sig
            errlayer = 0.5 + (b.pending - sig) / 2.0
            x = np.concatenate([sig, derivative, integral, errlayer, ctx], axis=1)
            hid, out = mlp_forward_stack(b.params, x)
            hidden_next[b.ids] = hid
            b.signal_prev = sig
            b.integral = integral
            b.pending = out
            b.input_prev = x

        if not np.isfinite(losses).all():
            raise NumericError("non-finite prediction loss; training aborted")

        self.hidden_prev = hidden_next
        self.frames_seen += 1

        unit_losses = []
        for lvl in range(self.n_levels):
            vals = losses[self.level_ids(lvl)]
            if lvl > 0:
                cols, rows = self.spec.level_dims[lvl]
                vals = vals.reshape(rows, cols)
            unit_losses.append(vals)
        lvl0 = losses[self.level_ids(0)]
        mse_image = float(lvl0.sum()) / (H * W * 3)
        mse_all = float(losses.sum()) / self._total_signal_dim
        errmap = ErrorMap(pixels=err_pix.reshape(H, W),
                          unit_losses=tuple(unit_losses))
        return StepResult(prediction=self.pending_frame(), errmap=errmap,
                          mse_image=mse_image, mse_all=mse_all)

    # ------------------------------------------------------------------
    # Persistence helpers
    # ------------------------------------------------------------------

    def clone(self) -> "Hierarchy":
        other = object.__new__(Hierarchy)
        other.spec = self.spec
        other.seed = self.seed
        other.tau = self.tau
        other.frames_seen = self.frames_seen
        other.level_offsets = self.level_offsets
        other.n_levels = self.n_levels
        other._owner = self._owner
        other.units = self.units
        other.unit_count = self.unit_count
        other._slot = self._slot
        other._total_signal_dim = self._total_signal_dim
        other.hidden_prev = self.hidden_prev.copy()
        other.buckets = []
        for b in self.buckets:
            nb = _Bucket(level=b.level, ids=b.ids, params=b.params.copy(),
                         ctx_idx=b.ctx_idx, pix_idx=b.pix_idx,
                         pixel_pos=b.pixel_pos, child_idx=b.child_idx)
            nb.signal_prev = b.signal_prev.copy()
            nb.integral = b.integral.copy()
            nb.pending = b.pending.copy()
            nb.input_prev = b.input_prev.copy()
            other.buckets.append(nb)
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All mutable arrays, keyed for checkpointing (deterministic order)."""
        out: dict[str, np.ndarray] = {}
        for i, b in enumerate(self.buckets):
            out[f"b{i}.w_h"] = b.params.w_h
            out[f"b{i}.b_h"] = b.params.b_h
            out[f"b{i}.w_p"] = b.params.w_p
            out[f"b{i}.b_p"] = b.params.b_p
            out[f"b{i}.signal_prev"] = b.signal_prev
            out[f"b{i}.integral"] = b.integral
            out[f"b{i}.pending"] = b.pending
            out[f"b{i}.input_prev"] = b.input_prev
        out["hidden_prev"] = self.hidden_prev
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            raise ValueError("checkpoint arrays do not match this hierarchy")
        for key, current in own.items():
            incoming = np.asarray(arrays[key], dtype=np.float64)
            if incoming.shape != current.shape:
                raise ValueError(f"array {key!r} has shape {incoming.shape}, "
                                 f"expected {current.shape}")
            current[...] = incoming


def build_hierarchy(spec: HierarchySpec, seed: int = 0,
                    tau: float = DEFAULT_TAU) -> Hierarchy:
    """Construct a fully wired network from a spec; seeded and deterministic."""
    return Hierarchy(spec, seed=seed, tau=tau)


def apply_fovea(h: Hierarchy, region: tuple[int, int, int, int],
                factor, seed: Optional[int] = None) -> Hierarchy:
    """Split the level-0 units inside ``region`` into factor-x-factor units.

    factor may be an int (both axes) or an (fx, fy) pair; 1 leaves the
    hierarchy unchanged.  The foveated network is rebuilt from the merged
    spec with the same seed: the fovea is a construction-time choice, and
    split units inherit the original cell's superior while laterals follow
    the new tile geometry.
    """
    if isinstance(factor, int):
        factor = (factor, factor)
    fx, fy = factor
    if fx == 1 and fy == 1:
        return h
    if h.spec.fovea is not None:
        raise ValueError("hierarchy already has a fovea")
    spec = replace(h.spec, fovea=FoveaSpec(tuple(region), (fx, fy)))
    return Hierarchy(spec, seed=h.seed if seed is None else seed, tau=h.tau)
