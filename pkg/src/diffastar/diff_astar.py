"""Matrix-form best-first search whose every step is differentiable.

The search state is a trio of (H, W) tensors: open mask O, closed mask C,
and accumulated cost-to-come G. One step selects the open cell minimizing
G + H through a temperature-softmax whose forward value is discretized by
a straight-through argmax, expands its ring of neighbors, and blends the
tentative costs into G. Training losses on C therefore see a gradient
contribution from every selection the search made.

Gradient-flow rules (deviating from them changes what is learned):

* the open mask is detached inside the selection softmax;
* the neighbor masks act as constants in the G update;
* of the G update's terms only the scalar ``<G, V*>`` is detached; the
  min-blend and carry-over terms keep their history;
* the goal-arrival flag eta stays on the tape, so the final selection
  still receives gradient through the closed-mask update it suppressed.

Forward exactness: selections are resolved by direct row-major-first
argmin comparison on the same float64 values the softmax sees, so the
discrete search trace matches ``run_inference`` (a plain heap search over
the same guidance map) bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTensor
from .errors import EmptyOpenList, ShapeMismatch, StepLimitExceeded, Unreachable
from .grid import GridMap, Node, ProblemInstance, heuristic_field, onehot_mask, path_mask
from .planners import SearchResult

MODE_BINARY_MASKED = "binary_masked"
MODE_IMAGE_UNMASKED = "image_unmasked"
VARIANT_NEURAL_ASTAR = "neural_astar"
VARIANT_NEURAL_BF = "neural_bf"

# 8-neighbor ring used to expand the selected cell.
EXPANSION_KERNEL = np.array(
    [[1.0, 1.0, 1.0],
     [1.0, 0.0, 1.0],
     [1.0, 1.0, 1.0]]
)


@dataclass(frozen=True)
class DiffAstarConfig:
    """Knobs for the differentiable search.

    ``tau=None`` resolves to sqrt(map width) at run time. ``max_steps=None``
    resolves to H*W, which can never trigger on a solvable instance since
    every step closes a distinct cell.
    """

    tau: float | None = None
    mode: str = MODE_BINARY_MASKED
    variant: str = VARIANT_NEURAL_ASTAR
    max_steps: int | None = None
    tie_break_euclid_coef: float = 0.001

    def __post_init__(self) -> None:
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in (MODE_BINARY_MASKED, MODE_IMAGE_UNMASKED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant not in (VARIANT_NEURAL_ASTAR, VARIANT_NEURAL_BF):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


@dataclass
class SearchState:
    """Per-instance state advanced by ``step_batch``; eta=0 means finished."""

    O: GradTensor
    C: GradTensor
    G: GradTensor
    parents: np.ndarray
    eta: int
    steps: int
    # static per-instance context
    phi: GradTensor
    hfield: GradTensor
    vg: GradTensor
    passable: np.ndarray
    goal_idx: int
    tau: float
    width: int
    selections: list[Node] = field(default_factory=list)


@dataclass
class DiffSearchOutput:
    """Result of one differentiable search.

    ``C`` is the tape-connected closed mask the training loss consumes;
    the remaining fields are plain values mirroring the classical planners'
    result conventions (goal excluded from ``closed``/``explored_count``).
    """

    C: GradTensor
    path: list[Node]
    path_mask: np.ndarray
    explored_count: int
    selections: list[Node]
    steps: int


def select_node(G: GradTensor, H: GradTensor, O: GradTensor, tau: float) -> GradTensor:
    """One-hot straight-through selection of the open cell minimizing G + H.

    The softmax over ``exp(-(G+H)/tau)`` restricted to open cells carries
    the backward pass; its argument is shifted by the open maximum so the
    exponent never overflows, a constant shift that leaves the gradient
    untouched. The hot cell itself comes from an exact argmin with
    row-major-first ties. Raises ``EmptyOpenList`` when no cell is open.
    """
    ov = O.values
    f = ad.add(G, H)
    masked = np.where(ov != 0.0, f.values, np.inf)
    k = int(masked.argmin())
    if not np.isfinite(masked.flat[k]):
        raise EmptyOpenList("no open cells to select from")
    oc = ad.detach(O)
    s = ad.scale(f, -1.0 / tau)
    # s is f rescaled by a negative constant, so the open-set maximum of s
    # sits exactly at the argmin cell k
    m = float(s.values.flat[k])
    z = ad.mul(ad.sub(s, m), oc)  # non-open exponents clamped to 0, killed below
    num = ad.mul(ad.exp(z), oc)
    den = ad.reduce_sum(num)
    ratio = ad.div(num, den)
    return ad.st_argmax(ratio, index=k)


def expand_nodes(
    vstar: GradTensor,
    passable: np.ndarray,
    O: GradTensor,
    C: GradTensor,
    mode: str = MODE_BINARY_MASKED,
) -> tuple[GradTensor, GradTensor]:
    """Masks of the selected cell's neighbors: newly reached and re-reached.

    Equals convolving the one-hot selection with the 8-ring kernel and
    gating by passability (masked mode only), non-open, and non-closed;
    written as a direct window fill since ``vstar`` is one-hot. Both
    outputs are constants: the G update treats neighborhoods as data.
    """
    hv = vstar.values
    h, w = hv.shape
    k = int(hv.argmax())
    r, c = divmod(k, w)
    ring = np.zeros((h, w))
    ring[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 1.0
    ring[r, c] = 0.0
    if mode == MODE_BINARY_MASKED:
        ring = ring * passable
    free = 1.0 - C.values
    n = ring * (1.0 - O.values) * free
    b = ring * O.values * free
    return ad.constant(n), ad.constant(b)


def update_g(
    G: GradTensor,
    vstar: GradTensor,
    phi: GradTensor,
    n: GradTensor,
    b: GradTensor,
) -> GradTensor:
    """Blend tentative costs into G.

    Newly reached cells take ``phi + <G, V*>``, re-reached open cells take
    the elementwise minimum with their current cost, everything else
    carries over. Only the scalar ``<G, V*>`` is detached: the selection
    still feels it through the straight-through path, while the min and
    carry terms keep G's own history alive.
    """
    gsel = ad.inner(ad.detach(G), vstar)
    gp = ad.add(phi, gsel)
    rest = ad.constant(1.0 - n.values - b.values)
    return ad.add(
        ad.add(ad.mul(gp, n), ad.mul(ad.min2(gp, G), b)),
        ad.mul(G, rest),
    )


def _step_one(st: SearchState, cfg: DiffAstarConfig) -> None:
    vstar = select_node(st.G, st.hfield, st.O, st.tau)
    k = int(vstar.values.argmax())
    st.selections.append(divmod(k, st.width))
    at_goal = k == st.goal_idx
    # goal test lives on the tape: eta's forward value is 0/1 but its
    # gradient path through <Vg, V*> stays connected either way
    eta = ad.sub(1.0, ad.inner(st.vg, vstar))
    st.C = ad.add(st.C, ad.mul(eta, vstar))
    eta_f = 0.0 if at_goal else 1.0
    o_values = st.O.values - eta_f * vstar.values
    o_after_close = ad.constant(o_values)
    n, b = expand_nodes(vstar, st.passable, o_after_close, st.C, cfg.mode)
    st.O = ad.constant(o_values + n.values)
    newly = np.flatnonzero(n.values)
    st.parents[newly] = k
    if cfg.variant == VARIANT_NEURAL_ASTAR:
        # recompute the tentative costs cheaply to find strict improvements;
        # same float ops as update_g, so the comparison is exact
        gp_values = st.phi.values + st.G.values.flat[k]
        improved = (b.values != 0.0) & (gp_values < st.G.values)
        st.parents[np.flatnonzero(improved)] = k
        st.G = update_g(st.G, vstar, st.phi, n, b)
    st.steps += 1
    if at_goal:
        st.eta = 0


def step_batch(states: list[SearchState], cfg: DiffAstarConfig) -> None:
    """Advance every unfinished state by one step; finished ones are skipped."""
    for i, st in enumerate(states):
        if st.eta == 0:
            continue
        try:
            _step_one(st, cfg)
        except EmptyOpenList as e:
            raise Unreachable(f"instance {i}: open list drained before the goal") from e


def _init_state(inst: ProblemInstance, phi: GradTensor, cfg: DiffAstarConfig) -> SearchState:
    h, w = inst.grid.shape
    if phi.values.shape != (h, w):
        raise ShapeMismatch(f"guidance map {phi.values.shape} vs grid {(h, w)}")
    if phi.values.min() < 0.0:
        raise ValueError("guidance costs must be non-negative")
    if cfg.mode == MODE_BINARY_MASKED and inst.grid.kind != "binary":
        raise ValueError("masked mode needs a binary map")
    if cfg.mode == MODE_IMAGE_UNMASKED and inst.grid.kind != "image":
        raise ValueError("unmasked mode is for image maps")
    tau = cfg.tau if cfg.tau is not None else math.sqrt(w)
    hf = heuristic_field(inst.grid, inst.goal, cfg.tie_break_euclid_coef)
    if cfg.variant == VARIANT_NEURAL_ASTAR:
        g0 = ad.constant(np.zeros((h, w)))
    else:
        g0 = phi  # best-first: static priority, never updated
    return SearchState(
        O=ad.constant(onehot_mask(inst.start, (h, w))),
        C=ad.constant(np.zeros((h, w))),
        G=g0,
        parents=np.full(h * w, -1, dtype=np.int64),
        eta=1,
        steps=0,
        phi=phi,
        hfield=ad.constant(hf),
        vg=ad.constant(onehot_mask(inst.goal, (h, w))),
        passable=inst.grid.passable_mask().astype(np.float64),
        goal_idx=inst.goal[0] * w + inst.goal[1],
        tau=float(tau),
        width=w,
    )


def run(
    insts: list[ProblemInstance],
    phis: list[GradTensor],
    cfg: DiffAstarConfig | None = None,
) -> list[DiffSearchOutput]:
    """Search every instance to its goal, stepping the batch in lockstep.

    All tape recording happens on whatever tape is active in the caller;
    running under no tape gives plain forward inference (prefer
    ``run_inference`` for that, it is much faster).
    """
    cfg = cfg or DiffAstarConfig()
    if len(insts) != len(phis):
        raise ValueError(f"{len(insts)} instances vs {len(phis)} guidance maps")
    states = [_init_state(inst, phi, cfg) for inst, phi in zip(insts, phis)]
    budgets = [
        cfg.max_steps if cfg.max_steps is not None else inst.grid.height * inst.grid.width
        for inst in insts
    ]
    while True:
        active = [i for i, st in enumerate(states) if st.eta == 1]
        if not active:
            break
        for i in active:
            if states[i].steps >= budgets[i]:
                raise StepLimitExceeded(f"instance {i}: no goal within {budgets[i]} steps")
        step_batch(states, cfg)

    outputs = []
    for inst, st in zip(insts, states):
        path = _backtrack_flat(st.parents, inst.start, inst.goal, st.width)
        outputs.append(
            DiffSearchOutput(
                C=st.C,
                path=path,
                path_mask=path_mask(path, inst.grid.shape),
                explored_count=int(round(st.C.values.sum())),
                selections=st.selections,
                steps=st.steps,
            )
        )
    return outputs


def _backtrack_flat(parents: np.ndarray, start: Node, goal: Node, width: int) -> list[Node]:
    path = [goal]
    cur = goal[0] * width + goal[1]
    start_idx = start[0] * width + start[1]
    while cur != start_idx:
        cur = int(parents[cur])
        if cur < 0:
            raise Unreachable(f"no parent chain from {goal} back to {start}")
        path.append(divmod(cur, width))
    path.reverse()
    return path


def run_inference(
    inst: ProblemInstance,
    phi_values: np.ndarray,
    cfg: DiffAstarConfig | None = None,
) -> SearchResult:
    """Heap-based replay of the differentiable search's forward pass.

    Produces bit-identical selections, costs, and parents to ``run`` on the
    same guidance values, without building any tape. Priorities are
    ``g + H`` with ``g`` accumulating guidance costs (neural A*) or the
    static ``phi + H`` (neural best-first); ties break row-major. The loop
    indexes flat Python lists rather than ndarrays: item access and float
    arithmetic on ndarray scalars cost several times more, and at these
    map sizes that overhead dominates the whole search.
    """
    import heapq

    cfg = cfg or DiffAstarConfig()
    h, w = inst.grid.shape
    phi_arr = np.asarray(phi_values, dtype=np.float64)
    if phi_arr.shape != (h, w):
        raise ShapeMismatch(f"guidance map {phi_arr.shape} vs grid {(h, w)}")
    if cfg.mode == MODE_BINARY_MASKED and inst.grid.kind != "binary":
        raise ValueError("masked mode needs a binary map")
    if cfg.mode == MODE_IMAGE_UNMASKED and inst.grid.kind != "image":
        raise ValueError("unmasked mode is for image maps")
    n = h * w
    # Same float64 values as the array forms; list items are C doubles,
    # so every sum and comparison below matches the taped run bit for bit.
    phi = phi_arr.ravel().tolist()
    heur = heuristic_field(inst.grid, inst.goal, cfg.tie_break_euclid_coef).ravel().tolist()
    if cfg.mode == MODE_BINARY_MASKED:
        passable = bytearray(inst.grid.binary.ravel().astype(np.uint8).tobytes())
    else:
        passable = bytearray(b"\x01" * n)
    budget = cfg.max_steps if cfg.max_steps is not None else n
    is_astar = cfg.variant == VARIANT_NEURAL_ASTAR

    g = [0.0] * n
    status = bytearray(n)  # 0 unseen, 1 open, 2 closed
    parents = np.full(n, -1, dtype=np.int64)
    closed = np.zeros(n, dtype=np.uint8)
    selections: list[Node] = []

    start_idx = inst.start[0] * w + inst.start[1]
    goal_idx = inst.goal[0] * w + inst.goal[1]
    status[start_idx] = 1
    f0 = g[start_idx] + heur[start_idx] if is_astar else phi[start_idx] + heur[start_idx]
    heap: list[tuple[float, int, float]] = [(f0, start_idx, 0.0)]
    steps = 0
    heappop = heapq.heappop
    heappush = heapq.heappush
    while heap:
        _, idx, entry_g = heappop(heap)
        if status[idx] != 1 or (is_astar and entry_g != g[idx]):
            continue
        if steps >= budget:
            raise StepLimitExceeded(f"no goal within {budget} steps")
        steps += 1
        r, c = divmod(idx, w)
        selections.append((r, c))
        if idx == goal_idx:
            path = _backtrack_flat(parents, inst.start, inst.goal, w)
            closed2 = closed.reshape(h, w)
            return SearchResult(
                path, closed2, int(closed.sum()), parents.reshape(h, w), selections
            )
        status[idx] = 2
        closed[idx] = 1
        gv = g[idx]
        for dr in (-1, 0, 1):
            nr = r + dr
            if nr < 0 or nr >= h:
                continue
            base = nr * w
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nc = c + dc
                if nc < 0 or nc >= w:
                    continue
                nidx = base + nc
                st = status[nidx]
                if not passable[nidx] or st == 2:
                    continue
                if is_astar:
                    cand = phi[nidx] + gv
                    if st == 0 or cand < g[nidx]:
                        g[nidx] = cand
                        parents[nidx] = idx
                        status[nidx] = 1
                        heappush(heap, (cand + heur[nidx], nidx, cand))
                else:
                    if st == 0:
                        parents[nidx] = idx
                        status[nidx] = 1
                        heappush(heap, (phi[nidx] + heur[nidx], nidx, 0.0))
    raise Unreachable(f"goal {inst.goal} not reachable from {inst.start}")
