"""Synthetic gridworld for object-goal navigation.

The agent sees a coarse image feature grid plus one detection row per object
class.  Detection confidence falls with distance and scales with object
size, so small objects are both rarely confident and noisy: the visibility
skew the attention diagnostics are meant to expose.

Conventions: ``x`` is the column, ``y`` the row (growing downwards).  Yaw 0
faces +x, 90 faces +y.  Pitch is -1 (down), 0 (level) or +1 (up).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

MOVE_AHEAD, ROTATE_LEFT, ROTATE_RIGHT, LOOK_DOWN, LOOK_UP, DONE = range(6)
ACTIONS = ("MoveAhead", "RotateLeft", "RotateRight", "LookDown", "LookUp", "Done")
NUM_ACTIONS = len(ACTIONS)
HEIGHT_BANDS = ("low", "mid", "high")
WORLD_FORMAT = "doanav-world/1"


class WorldGenerationError(ValueError):
    pass


class EpisodeSpecError(ValueError):
    pass


@dataclass
class WorldConfig:
    grid_w: int = 10
    grid_h: int = 10
    num_classes: int = 22
    class_base_size: list | None = None
    class_affinity: list | None = None
    view_range: float = 5.0
    fov_deg: float = 90.0
    success_dist: float = 2.0
    max_steps: int = 100
    conf_noise_sigma: float = 0.05
    visual_noise_sigma: float = 0.5
    image_noise_sigma: float = 0.05
    d_img: int = 32
    d_vis: int = 32
    m_cells: int = 16
    ground_truth_detections: bool = False
    obstacle_density: float = 0.05
    n_clusters: int = 8
    cluster_size: tuple = (3, 5)
    min_classes: int = 4
    place_all_classes: bool = False
    distinct_cells: bool = False
    height_bands: bool = True
    reward_success: float = 5.0
    step_penalty: float = 0.01
    signature_seed: int = 7

    def __post_init__(self):
        n = self.num_classes
        if self.class_base_size is None:
            self.class_base_size = np.linspace(1.0, 0.3, n).tolist()
        if self.class_affinity is None:
            self.class_affinity = default_affinity(n).tolist()
        self.cluster_size = tuple(self.cluster_size)

    def validate(self) -> None:
        n = self.num_classes
        if n < 4:
            raise WorldGenerationError("need at least 4 object classes")
        if self.min_classes > n:
            raise WorldGenerationError(f"min_classes={self.min_classes} exceeds num_classes={n}")
        sizes = np.asarray(self.class_base_size)
        if sizes.shape != (n,) or np.any(sizes < 0.3) or np.any(sizes > 1.0):
            raise WorldGenerationError("class_base_size must hold num_classes values in [0.3, 1]")
        aff = np.asarray(self.class_affinity, dtype=float)
        if aff.shape != (n, n) or np.any(aff < 0) or not np.allclose(aff, aff.T):
            raise WorldGenerationError("class_affinity must be a symmetric non-negative NxN matrix")
        side = math.isqrt(self.m_cells)
        if side * side != self.m_cells:
            raise WorldGenerationError(f"m_cells={self.m_cells} must be a perfect square")
        if self.grid_w < 1 or self.grid_h < 1:
            raise WorldGenerationError("grid must be non-empty")

    @property
    def s_dim(self) -> int:
        return self.d_vis + 6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cluster_size"] = list(self.cluster_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config fields: {sorted(unknown)}")
        return cls(**d)


def default_affinity(n: int) -> np.ndarray:
    """Pair class ``i`` with class ``n - 1 - i``: the largest with the smallest."""
    aff = np.full((n, n), 0.02)
    for i in range(n):
        aff[i, n - 1 - i] = 1.0
    np.fill_diagonal(aff, 0.0)
    return aff


class AgentState(NamedTuple):
    x: int
    y: int
    yaw: int
    pitch: int


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    x: int
    y: int
    height_band: str
    size: float


class Detection(NamedTuple):
    class_id: int
    visual: np.ndarray
    bbox: np.ndarray
    conf: float
    target_flag: int


@dataclass
class Observation:
    image: np.ndarray  # M x D_img
    detections: np.ndarray  # N x (D_vis + 6): visual | cx, cy, w, h | conf | target

    @property
    def conf(self) -> np.ndarray:
        return self.detections[:, -2]

    def detection(self, q: int) -> Detection:
        row = self.detections[q]
        d_vis = row.size - 6
        return Detection(q, row[:d_vis], row[d_vis:d_vis + 4], float(row[-2]), int(row[-1]))


@dataclass
class StepOutcome:
    next_state: AgentState
    observation: Observation
    reward: float
    done: bool
    success: bool
    info: dict = field(default_factory=dict)


class Signatures:
    """Per-class feature prototypes shared by every world built from one config."""

    def __init__(self, cfg: WorldConfig):
        rng = np.random.default_rng(cfg.signature_seed)
        vis = rng.normal(size=(cfg.num_classes, cfg.d_vis))
        self.visual = vis / np.linalg.norm(vis, axis=1, keepdims=True) * math.sqrt(cfg.d_vis) * 0.5
        img = rng.normal(size=(cfg.num_classes, cfg.d_img))
        self.image = img / np.linalg.norm(img, axis=1, keepdims=True)
        floor = rng.normal(size=cfg.d_img)
        self.floor = floor / np.linalg.norm(floor)


@dataclass
class World:
    cfg: WorldConfig
    seed: int
    blocked: np.ndarray  # grid_h x grid_w bool, obstacles and unreachable pockets
    walls: np.ndarray  # grid_h x grid_w bool, cells that block line of sight
    objects: list

    def __post_init__(self):
        self.signatures = Signatures(self.cfg)
        self._path_cache: dict = {}

    @property
    def walkable(self) -> np.ndarray:
        occ = np.zeros_like(self.blocked)
        for o in self.objects:
            occ[o.y, o.x] = True
        return ~self.blocked & ~occ

    def classes_present(self) -> list:
        return sorted({o.class_id for o in self.objects})

    def instances(self, class_id: int) -> list:
        return [o for o in self.objects if o.class_id == class_id]

    def to_dict(self) -> dict:
        return {
            "format": WORLD_FORMAT,
            "seed": self.seed,
            "config": self.cfg.to_dict(),
            "blocked": ["".join("#" if b else "." for b in row) for row in self.blocked],
            "walls": ["".join("#" if b else "." for b in row) for row in self.walls],
            "objects": [asdict(o) for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        if d.get("format") != WORLD_FORMAT:
            raise ValueError(f"unsupported world format {d.get('format')!r}")
        grid = lambda rows: np.array([[c == "#" for c in r] for r in rows], dtype=bool)  # noqa: E731
        return cls(WorldConfig.from_dict(d["config"]), int(d["seed"]), grid(d["blocked"]),
                   grid(d["walls"]), [ObjectInstance(**o) for o in d["objects"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "World":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- generation -------------------------------------------------------------
def generate_world(seed: int, cfg: WorldConfig, max_attempts: int = 50) -> World:
    """Build a world with obstacles and affinity-driven object clusters.

    Object cells are not walkable.  Walkable cells outside the largest
    connected component are turned into obstacles, so every free cell is
    reachable from every other.
    """
    cfg.validate()
    h, w, n = cfg.grid_h, cfg.grid_w, cfg.num_classes
    if cfg.distinct_cells and cfg.place_all_classes and n > h * w - 1:
        raise WorldGenerationError(f"{n} classes cannot take distinct cells in a {w}x{h} grid")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    aff = np.asarray(cfg.class_affinity, dtype=float)
    sizes = np.asarray(cfg.class_base_size, dtype=float)
    for _ in range(max_attempts):
        walls = rng.random((h, w)) < cfg.obstacle_density
        taken: dict = {}  # (x, y) -> set of class ids
        objects = []

        def place(c, cells):
            for x, y in cells:
                here = taken.get((x, y), set())
                if walls[y, x] or c in here or (cfg.distinct_cells and here):
                    continue
                taken.setdefault((x, y), set()).add(c)
                objects.append(_make_instance(rng, cfg, c, x, y, sizes[c]))
                return True
            return False

        free = [(x, y) for y in range(h) for x in range(w) if not walls[y, x]]
        if not free:
            continue
        for _ in range(cfg.n_clusters):
            ax, ay = free[rng.integers(len(free))]
            lo, hi = cfg.cluster_size
            k = min(int(rng.integers(lo, hi + 1)), n)
            members = [int(rng.integers(n))]
            while len(members) < k:
                weight = aff[members].sum(axis=0)
                weight[members] = 0.0
                if weight.sum() <= 0:
                    weight = np.ones(n)
                    weight[members] = 0.0
                members.append(int(rng.choice(n, p=weight / weight.sum())))
            near = [(ax + dx, ay + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                    if 0 <= ax + dx < w and 0 <= ay + dy < h]
            for c in members:
                place(c, [near[i] for i in rng.permutation(len(near))])
        if cfg.place_all_classes:
            present = {o.class_id for o in objects}
            for c in range(n):
                if c not in present:
                    cells = [free[i] for i in rng.permutation(len(free))]
                    if not place(c, cells):
                        raise WorldGenerationError(f"no room left for class {c}")
        blocked = walls.copy()
        for (x, y) in taken:
            blocked[y, x] = True
        blocked = _prune_unreachable(blocked, taken)
        if blocked is None:
            continue
        if len({o.class_id for o in objects}) < cfg.min_classes:
            continue
        return World(cfg, seed, blocked, walls, objects)
    raise WorldGenerationError(f"could not generate a valid world after {max_attempts} attempts")


def _make_instance(rng, cfg, c, x, y, base_size) -> ObjectInstance:
    size = float(np.clip(base_size * rng.uniform(0.9, 1.0), 0.3, 1.0))
    if cfg.height_bands:
        # small objects sit low or high more often than large ones
        p_mid = 0.3 + 0.6 * (base_size - 0.3) / 0.7
        p = np.array([(1 - p_mid) / 2, p_mid, (1 - p_mid) / 2])
        band = HEIGHT_BANDS[int(rng.choice(3, p=p))]
    else:
        band = "mid"
    return ObjectInstance(int(c), int(x), int(y), band, size)


def _prune_unreachable(blocked: np.ndarray, taken: dict):
    h, w = blocked.shape
    occupied = set(taken)
    comp = -np.ones((h, w), dtype=int)
    sizes = []
    for y in range(h):
        for x in range(w):
            if blocked[y, x] or comp[y, x] >= 0:
                continue
            cid = len(sizes)
            q = deque([(x, y)])
            comp[y, x] = cid
            count = 0
            while q:
                cx, cy = q.popleft()
                count += 1
                for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
                    if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and comp[ny, nx] < 0:
                        comp[ny, nx] = cid
                        q.append((nx, ny))
            sizes.append(count)
    if not sizes:
        return None
    keep = int(np.argmax(sizes))
    out = blocked.copy()
    out[(comp >= 0) & (comp != keep)] = True
    for xy in occupied:
        out[xy[1], xy[0]] = True
    return out


# -- geometry ---------------------------------------------------------------
_HEADINGS = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


def _line_clear(walls: np.ndarray, x0, y0, x1, y1) -> bool:
    n = int(max(abs(x1 - x0), abs(y1 - y0)) * 4)
    for i in range(1, n):
        t = i / n
        cx, cy = int(round(x0 + (x1 - x0) * t)), int(round(y0 + (y1 - y0) * t))
        if (cx, cy) in ((x0, y0), (x1, y1)):
            continue
        if walls[cy, cx]:
            return False
    return True


def _relative(state: AgentState, ox, oy):
    dx, dy = ox - state.x, oy - state.y
    d = math.hypot(dx, dy)
    hx, hy = _HEADINGS[state.yaw]
    angle = math.atan2(hx * dy - hy * dx, hx * dx + hy * dy)  # positive = to the agent's right
    return d, angle


def is_visible(world: World, state: AgentState, obj: ObjectInstance) -> bool:
    cfg = world.cfg
    d, angle = _relative(state, obj.x, obj.y)
    if d <= 0 or d > cfg.view_range:
        return False
    if abs(math.degrees(angle)) > cfg.fov_deg / 2 + 1e-9:
        return False
    if obj.height_band == "low" and not (state.pitch == -1 or d <= 2):
        return False
    if obj.height_band == "high" and not (state.pitch == 1 or d <= 2):
        return False
    return _line_clear(world.walls, state.x, state.y, obj.x, obj.y)


def target_distance(world: World, state: AgentState, target: int) -> float:
    ds = [math.hypot(o.x - state.x, o.y - state.y) for o in world.instances(target)]
    return min(ds) if ds else math.inf


def success_predicate(world: World, state: AgentState, target: int) -> bool:
    r = world.cfg.success_dist
    return any(math.hypot(o.x - state.x, o.y - state.y) <= r and is_visible(world, state, o)
               for o in world.instances(target))


# -- observation ------------------------------------------------------------
def observe(world: World, state: AgentState, rng: np.random.Generator, target: int) -> Observation:
    """Render detections and the image feature grid for ``state``.

    The target row always carries ``target_flag = 1`` so the agent knows what
    it is looking for; every other column of an undetected class is zero.
    """
    cfg = world.cfg
    sig = world.signatures
    n, dv = cfg.num_classes, cfg.d_vis
    side = math.isqrt(cfg.m_cells)
    det = np.zeros((n, dv + 6))
    image = np.zeros((cfg.m_cells, cfg.d_img))
    half_fov = math.radians(cfg.fov_deg) / 2
    best: dict = {}
    for obj in world.objects:
        if not is_visible(world, state, obj):
            continue
        d, angle = _relative(state, obj.x, obj.y)
        if obj.class_id not in best or d < best[obj.class_id][0]:
            best[obj.class_id] = (d, angle, obj)
    gt = cfg.ground_truth_detections
    for c in sorted(best):
        d, angle, obj = best[c]
        if gt:
            conf = 1.0
        else:
            conf = float(np.clip(obj.size * (1.0 - d / cfg.view_range) + rng.normal(0.0, cfg.conf_noise_sigma), 0, 1))
        band_y = {"low": 1.0, "mid": 0.0, "high": -1.0}[obj.height_band]
        cx = float(np.clip(0.5 + 0.5 * angle / half_fov, 0.0, 1.0))
        cy = float(np.clip(0.5 + 0.3 * (band_y + state.pitch) / (1.0 + 0.2 * d), 0.0, 1.0))
        bw = float(np.clip(obj.size / (1.0 + d), 0.0, 1.0))
        bh = float(np.clip(1.2 * obj.size / (1.0 + d), 0.0, 1.0))
        sigma = 0.0 if gt else (1.0 - conf) * cfg.visual_noise_sigma
        visual = sig.visual[c] * conf + (rng.normal(0.0, sigma, dv) if sigma > 0 else 0.0)
        det[c, :dv] = visual
        det[c, dv:dv + 4] = (cx, cy, bw, bh)
        det[c, dv + 4] = conf
        col = min(int(cx * side), side - 1)
        row = min(int(cy * side), side - 1)
        image[row * side + col] += sig.image[c] * conf
    det[target, dv + 5] = 1.0
    for j, depth in enumerate(_column_depths(world, state, side)):
        image[j::side] += sig.floor * (0.5 * depth / cfg.view_range)
    if cfg.image_noise_sigma > 0:
        image += rng.normal(0.0, cfg.image_noise_sigma, image.shape)
    return Observation(image, det)


def _column_depths(world: World, state: AgentState, side: int) -> list:
    cfg = world.cfg
    h, w = world.blocked.shape
    base = math.radians(state.yaw)
    fov = math.radians(cfg.fov_deg)
    out = []
    for j in range(side):
        a = base - fov / 2 + (j + 0.5) / side * fov
        dx, dy = math.cos(a), math.sin(a)
        depth = 0.0
        while depth < cfg.view_range:
            nx, ny = state.x + dx * (depth + 0.5), state.y + dy * (depth + 0.5)
            cx, cy = int(round(nx)), int(round(ny))
            if not (0 <= cx < w and 0 <= cy < h) or (world.blocked[cy, cx] and (cx, cy) != (state.x, state.y)):
                break
            depth += 0.5
        out.append(depth)
    return out


# -- dynamics ---------------------------------------------------------------
def _transition(world: World, state: AgentState, action: int):
    if action == MOVE_AHEAD:
        hx, hy = _HEADINGS[state.yaw]
        nx, ny = state.x + hx, state.y + hy
        h, w = world.blocked.shape
        if 0 <= nx < w and 0 <= ny < h and not world.blocked[ny, nx]:
            return state._replace(x=nx, y=ny), False
        return state, True
    if action == ROTATE_LEFT:
        return state._replace(yaw=(state.yaw - 90) % 360), False
    if action == ROTATE_RIGHT:
        return state._replace(yaw=(state.yaw + 90) % 360), False
    if action == LOOK_DOWN:
        return state._replace(pitch=max(-1, state.pitch - 1)), False
    if action == LOOK_UP:
        return state._replace(pitch=min(1, state.pitch + 1)), False
    return state, False


class NavEnv:
    """One episode at a time on a fixed world.  Not thread-safe; use one per worker."""

    def __init__(self, world: World):
        self.world = world
        self.state: AgentState | None = None
        self.target: int | None = None
        self.t = 0
        self.done = True
        self.rng = np.random.default_rng(0)

    def reset(self, target_class: int, seed: int, avoid_goal_start: bool = True):
        world = self.world
        if target_class not in world.classes_present():
            raise EpisodeSpecError(f"target class {target_class} is not present in world {world.seed}")
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE915]))
        ys, xs = np.nonzero(world.walkable)
        for _ in range(100):
            i = int(self.rng.integers(len(xs)))
            state = AgentState(int(xs[i]), int(ys[i]), int(self.rng.integers(4)) * 90, 0)
            if not avoid_goal_start or not success_predicate(world, state, target_class):
                break
        self.state, self.target, self.t, self.done = state, target_class, 0, False
        return state, observe(world, state, self.rng, target_class)

    def step(self, action: int) -> StepOutcome:
        if not 0 <= int(action) < NUM_ACTIONS:
            raise ValueError(f"action index {action} out of range")
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        world, cfg = self.world, self.world.cfg
        self.t += 1
        success = False
        if action == DONE:
            success = success_predicate(world, self.state, self.target)
            done = True
            nxt, collided = self.state, False
        else:
            nxt, collided = _transition(world, self.state, int(action))
            done = self.t >= cfg.max_steps
        self.state, self.done = nxt, done
        reward = cfg.reward_success if success else -cfg.step_penalty
        obs = observe(world, nxt, self.rng, self.target)
        info = {
            "collided": collided,
            "target_visible": any(is_visible(world, nxt, o) for o in world.instances(self.target)),
            "dist_to_target": target_distance(world, nxt, self.target),
        }
        return StepOutcome(nxt, obs, reward, done, success, info)


def shortest_path_length(world: World, pose: AgentState, target_class: int) -> float:
    """Fewest non-Done actions to reach a pose where Done would succeed (BFS)."""
    key = target_class
    if key not in world._path_cache:
        world._path_cache[key] = _goal_distances(world, target_class)
    return world._path_cache[key].get(tuple(pose), math.inf)


def reachable_classes(world: World) -> list:
    """Present classes with at least one pose from which Done would succeed."""
    out = []
    for c in world.classes_present():
        if c not in world._path_cache:
            world._path_cache[c] = _goal_distances(world, c)
        if world._path_cache[c]:
            out.append(c)
    return out


def _goal_distances(world: World, target: int) -> dict:
    """Backward BFS from every goal pose; maps pose -> action count."""
    walk = world.walkable
    h, w = walk.shape
    poses = [AgentState(x, y, yaw, p) for y in range(h) for x in range(w) if walk[y, x]
             for yaw in (0, 90, 180, 270) for p in (-1, 0, 1)]
    preds: dict = {}
    for s in poses:
        for a in range(DONE):
            nxt, _ = _transition(world, s, a)
            if nxt != s:
                preds.setdefault(tuple(nxt), []).append(tuple(s))
    dist = {}
    q = deque()
    for s in poses:
        if success_predicate(world, s, target):
            dist[tuple(s)] = 0
            q.append(tuple(s))
    while q:
        s = q.popleft()
        for p in preds.get(s, ()):
            if p not in dist:
                dist[p] = dist[s] + 1
                q.append(p)
    return dist
