"""Planar point-mass manipulation world.

The gripper is a point in the unit square with first-order velocity control
(``pos += SPEED * clip(v)``) and a binary open/closed state. Only the task's
target object takes part in physics: it can be grasped (closing within
``GRASP_R``) or pushed (closed gripper within ``PUSH_R``). Every other object
is static, so perturbation suites change what the policy sees and nothing
else.

Action vector: ``(vx, vy, grip)`` in [-1, 1]^3; ``grip > 0`` means open.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, GenerationError, NumericFault
from .numkit import STORE_DTYPE, RngStream
from .policy import PolicyParams, TokenBatch, effective_tensors, predict_action

log = logging.getLogger(__name__)

COLORS = ("red", "green", "blue", "yellow", "purple")
KINDS = ("reach", "push", "pick_place", "press")
OBS_FEATURES = len(COLORS) + 7  # one-hot, goal flag, x, y, dx, dy, shape, brightness
STATE_FEATURES = 3
D_ACTION = 3

SPEED = 0.1
GRASP_R = 0.05
PUSH_R = 0.06
PUSH_SUBSTEPS = 4
LIGHT_GAIN = 0.1
REL_SCALE = 3.0  # gripper-relative offsets are scaled up so small gaps stay visible
CLOSE_R = 0.03  # expert grasp / release distance, inside GRASP_R
GRIPPER_START = (0.5, 0.05)

# object placement rectangle (also the eval grid) and goal region
OBJ_X = (0.1, 0.9)
OBJ_Y = (0.25, 0.55)
GOAL_X = (0.15, 0.85)
GOAL_Y = (0.75, 0.92)
GRID_ROWS, GRID_COLS = 5, 8
PERTURBATIONS = ("none", "lighting", "form", "distractor")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    color: str
    task_token: int
    horizon: int = 40
    delta: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.color not in COLORS:
            raise ContractError(f"unknown color {self.color!r}")
        if self.delta <= 0:
            raise ContractError("success threshold must be positive")
        if self.horizon < 10:
            raise ContractError("horizon must be >= 10")

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.color}"

    @property
    def needs_goal(self) -> bool:
        return self.kind in ("push", "pick_place")

    def to_dict(self) -> dict:
        return dict(kind=self.kind, color=self.color, task_token=self.task_token, horizon=self.horizon, delta=self.delta)


TASKS: dict[str, TaskSpec] = {
    t.name: t
    for t in (
        TaskSpec("reach", "red", 0),
        TaskSpec("push", "blue", 1),
        TaskSpec("pick_place", "green", 2),
        TaskSpec("press", "yellow", 3),
        TaskSpec("reach", "green", 4),
        TaskSpec("pick_place", "red", 5),
    )
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ContractError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


@dataclass
class SceneObject:
    color: int
    pos: np.ndarray
    shape: float = 1.0
    distractor: bool = False


@dataclass
class Scene:
    objects: list[SceneObject]
    target: int  # index into objects
    goal: np.ndarray | None = None
    brightness: float = 0.0
    gripper: np.ndarray = field(default_factory=lambda: np.array(GRIPPER_START, float))
    gripper_open: float = 1.0
    held: bool = False
    press_count: int = 0

    def copy(self) -> "Scene":
        return Scene(
            [SceneObject(o.color, o.pos.copy(), o.shape, o.distractor) for o in self.objects],
            self.target,
            None if self.goal is None else self.goal.copy(),
            self.brightness,
            self.gripper.copy(),
            self.gripper_open,
            self.held,
            self.press_count,
        )

    @property
    def target_pos(self) -> np.ndarray:
        return self.objects[self.target].pos


# ---------------------------------------------------------------------------
# scene construction


def _far_point(gen, lo_x, lo_y, avoid, min_d, tries=100):
    for _ in range(tries):
        p = np.array([gen.uniform(*lo_x), gen.uniform(*lo_y)])
        if all(np.linalg.norm(p - q) >= min_d for q in avoid):
            return p
    return p


def make_scene(task: TaskSpec, gen: np.random.Generator, target_pos=None, clutter: tuple[int, int] = (1, 1)) -> Scene:
    """Target object, ``clutter`` static objects of other colors, and a goal when needed.

    ``clutter = (lo, hi)`` draws the number of other objects uniformly from
    ``lo..hi`` (all colors distinct).
    """
    lo, hi = clutter
    if not 0 <= lo <= hi <= len(COLORS) - 1:
        raise ContractError(f"clutter range {clutter} invalid")
    tcol = COLORS.index(task.color)
    tpos = np.array(target_pos, float) if target_pos is not None else np.array(
        [gen.uniform(*OBJ_X), gen.uniform(*OBJ_Y)]
    )
    n_other = lo if lo == hi else int(gen.integers(lo, hi + 1))
    other_cols = gen.permutation([i for i in range(len(COLORS)) if i != tcol])[:n_other]
    goal = None
    if task.needs_goal:
        goal = _far_point(gen, GOAL_X, GOAL_Y, [tpos], 0.2)
    avoid = [tpos] + ([goal] if goal is not None else [])
    objs = [SceneObject(tcol, tpos, float(gen.uniform(0.8, 1.2)))]
    for c in other_cols:
        opos = _far_point(gen, OBJ_X, OBJ_Y, avoid, 0.15)
        avoid.append(opos)
        objs.append(SceneObject(int(c), opos, float(gen.uniform(0.8, 1.2))))
    order = gen.permutation(len(objs))
    objs = [objs[i] for i in order]
    return Scene(objs, int(np.argmin(order)), goal, float(gen.uniform(-0.2, 0.2)))


def perturb_scene(scene: Scene, perturbation: str, gen: np.random.Generator) -> Scene:
    """Apply one observation-level perturbation suite to a copy of ``scene``."""
    s = scene.copy()
    if perturbation == "none":
        return s
    if perturbation == "lighting":
        mag = gen.uniform(0.5, 1.0)
        s.brightness = float(mag if gen.random() < 0.5 else -mag)
    elif perturbation == "form":
        for o in s.objects:
            o.shape *= 1.4 if gen.random() < 0.5 else 0.6
    elif perturbation == "distractor":
        used = {o.color for o in s.objects}
        free = [i for i in range(len(COLORS)) if i not in used]
        n = int(gen.integers(1, 3))
        avoid = [o.pos for o in s.objects] + ([s.goal] if s.goal is not None else [])
        for c in gen.permutation(free)[:n]:
            p = _far_point(gen, (0.05, 0.95), (0.2, 0.95), avoid, 0.12)
            avoid.append(p)
            s.objects.append(SceneObject(int(c), p, float(gen.uniform(0.8, 1.2)), distractor=True))
    else:
        raise ContractError(f"unknown perturbation {perturbation!r}")
    return s


# ---------------------------------------------------------------------------
# observation encoding


def encode_obs(scene: Scene, n_obs: int) -> tuple[np.ndarray, np.ndarray]:
    feats = []
    b = scene.brightness
    for o in scene.objects:
        f = np.zeros(OBS_FEATURES)
        f[o.color] = 1.0
        f[len(COLORS) + 1 : len(COLORS) + 3] = o.pos
        f[len(COLORS) + 3 : len(COLORS) + 5] = REL_SCALE * (o.pos - scene.gripper)
        f[len(COLORS) + 5] = o.shape
        feats.append(f)
    if scene.goal is not None:
        f = np.zeros(OBS_FEATURES)
        f[len(COLORS)] = 1.0
        f[len(COLORS) + 1 : len(COLORS) + 3] = scene.goal
        f[len(COLORS) + 3 : len(COLORS) + 5] = REL_SCALE * (scene.goal - scene.gripper)
        f[len(COLORS) + 5] = 1.0
        feats.append(f)
    if len(feats) > n_obs:
        raise ContractError(f"scene has {len(feats)} tokens, config allows {n_obs}")
    obs = np.zeros((n_obs, OBS_FEATURES), STORE_DTYPE)
    mask = np.zeros(n_obs, bool)
    for i, f in enumerate(feats):
        f[:-1] += LIGHT_GAIN * b
        f[-1] = b
        obs[i] = f
        mask[i] = True
    return obs, mask


def encode_state(scene: Scene) -> np.ndarray:
    return np.array([scene.gripper[0], scene.gripper[1], scene.gripper_open], STORE_DTYPE)


def encode_batch(scenes: Sequence[Scene], task: TaskSpec, n_obs: int) -> TokenBatch:
    enc = [encode_obs(s, n_obs) for s in scenes]
    return TokenBatch(
        np.full(len(scenes), task.task_token, np.int64),
        np.stack([e[0] for e in enc]),
        np.stack([e[1] for e in enc]),
        np.stack([encode_state(s) for s in scenes]),
    )


# ---------------------------------------------------------------------------
# dynamics and success


def step(scene: Scene, action: np.ndarray) -> np.ndarray:
    """Advance ``scene`` in place by one Euler step (dt=1). Returns the clamped action."""
    a = np.clip(np.asarray(action, float), -1.0, 1.0)
    if not np.all(np.isfinite(a)):
        raise NumericFault("non-finite action", "rollout")
    was_open = scene.gripper_open > 0.5
    now_open = a[2] > 0.0
    scene.gripper_open = 1.0 if now_open else 0.0
    tgt = scene.objects[scene.target]
    pushing = not now_open and not scene.held
    if scene.held and now_open:
        scene.held = False
    if not pushing:
        scene.gripper = np.clip(scene.gripper + SPEED * a[:2], 0.0, 1.0)
    else:
        # contact is resolved in substeps shorter than PUSH_R so nothing tunnels
        for _ in range(PUSH_SUBSTEPS):
            scene.gripper = np.clip(scene.gripper + SPEED / PUSH_SUBSTEPS * a[:2], 0.0, 1.0)
            d = tgt.pos - scene.gripper
            dist = np.linalg.norm(d)
            if dist < PUSH_R and not (was_open and dist < GRASP_R):
                u = d / dist if dist > 1e-9 else a[:2] / (np.linalg.norm(a[:2]) + 1e-12)
                tgt.pos = np.clip(scene.gripper + PUSH_R * u, 0.0, 1.0)
    if scene.held:
        tgt.pos = scene.gripper.copy()
    elif was_open and not now_open and np.linalg.norm(scene.gripper - tgt.pos) < GRASP_R:
        scene.held = True
        tgt.pos = scene.gripper.copy()
    near = np.linalg.norm(scene.gripper - tgt.pos) < GRASP_R
    scene.press_count = scene.press_count + 1 if (near and not now_open) else 0
    return a


def is_success(scene: Scene, task: TaskSpec) -> bool:
    tgt = scene.target_pos
    if task.kind == "reach":
        return bool(np.linalg.norm(scene.gripper - tgt) < task.delta)
    if task.kind == "push":
        return bool(np.linalg.norm(tgt - scene.goal) < task.delta)
    if task.kind == "pick_place":
        return bool(not scene.held and np.linalg.norm(tgt - scene.goal) < task.delta)
    return scene.press_count >= 3


# ---------------------------------------------------------------------------
# scripted expert


def _move(p, target):
    # norm-limited so the heading is preserved when saturated
    v = (np.asarray(target) - p) / SPEED
    n = np.linalg.norm(v)
    return v / n if n > 1.0 else v


def expert_action(scene: Scene, task: TaskSpec) -> np.ndarray:
    """Markov proportional controller; depends only on the current scene."""
    p = scene.gripper
    o = scene.target_pos
    v = np.zeros(2)
    grip = 1.0
    if task.kind == "reach":
        v = _move(p, o)
    elif task.kind == "press":
        if np.linalg.norm(p - o) < CLOSE_R:
            grip = -1.0
        else:
            v = _move(p, o)
    elif task.kind == "pick_place":
        g = scene.goal
        if scene.held:
            if np.linalg.norm(p - g) < CLOSE_R:
                grip = 1.0
            else:
                v, grip = _move(p, g), -1.0
        elif np.linalg.norm(o - g) < task.delta:
            pass
        elif np.linalg.norm(p - o) < CLOSE_R:
            grip = -1.0
        else:
            v = _move(p, o)
    else:  # push with a closed gripper
        g = scene.goal
        grip = -1.0
        if np.linalg.norm(o - g) >= task.delta * 0.5:
            u = (g - o) / np.linalg.norm(g - o)
            contact = o - u * PUSH_R
            if np.linalg.norm(p - contact) < 0.04:
                v = _move(p, g - u * PUSH_R)
            else:
                v = _move(p, o - u * (PUSH_R + 0.02))
    return np.array([v[0], v[1], grip])


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class Trajectory:
    task: TaskSpec
    obs: np.ndarray  # (T, n_obs, F)
    obs_mask: np.ndarray  # (T, n_obs)
    state: np.ndarray  # (T, 3)
    actions: np.ndarray  # (T, d) expert labels
    gripper_change: np.ndarray  # (T,) bool
    success: bool = True

    @property
    def T(self) -> int:
        return int(self.actions.shape[0])

    def batch(self, idx=None) -> TokenBatch:
        idx = np.arange(self.T) if idx is None else np.asarray(idx)
        return TokenBatch(
            np.full(len(idx), self.task.task_token, np.int64), self.obs[idx], self.obs_mask[idx], self.state[idx]
        )


@dataclass
class DemoSet:
    trajectories: list[Trajectory]
    task_label: str
    seed: int = 0

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ContractError("a DemoSet needs at least 2 trajectories")
        dims = {t.actions.shape[1] for t in self.trajectories}
        if len(dims) != 1:
            raise ContractError("trajectories disagree on action dimension")

    @property
    def N(self) -> int:
        return len(self.trajectories)

    def flatten(self) -> tuple[TokenBatch, np.ndarray]:
        batch = TokenBatch.concat([t.batch() for t in self.trajectories])
        acts = np.concatenate([t.actions for t in self.trajectories]).astype(STORE_DTYPE)
        return batch, acts

    def subset(self, idx, label: str | None = None) -> "DemoSet":
        return DemoSet([self.trajectories[i] for i in idx], label or self.task_label, self.seed)

    @classmethod
    def merge(cls, sets: Sequence["DemoSet"], label: str | None = None) -> "DemoSet":
        trajs = [t for s in sets for t in s.trajectories]
        return cls(trajs, label or "+".join(s.task_label for s in sets), sets[0].seed)


def _gripper_changes(actions: np.ndarray) -> np.ndarray:
    sign = actions[:, 2] > 0
    ch = np.zeros(len(actions), bool)
    ch[1:] = sign[1:] != sign[:-1]
    return ch


def record_expert(task: TaskSpec, scene: Scene, n_obs: int, noise: float, gen) -> Trajectory:
    """Run the expert for ``task.horizon`` steps, executing noisy actions but recording clean labels."""
    s = scene.copy()
    T = task.horizon
    obs = np.zeros((T, n_obs, OBS_FEATURES), STORE_DTYPE)
    mask = np.zeros((T, n_obs), bool)
    state = np.zeros((T, STATE_FEATURES), STORE_DTYPE)
    acts = np.zeros((T, D_ACTION), STORE_DTYPE)
    ok = False
    for t in range(T):
        obs[t], mask[t] = encode_obs(s, n_obs)
        state[t] = encode_state(s)
        a = expert_action(s, task)
        acts[t] = a
        executed = a.copy()
        if noise > 0:
            executed[:2] += gen.uniform(-noise, noise, 2)
        step(s, executed)
        ok = ok or is_success(s, task)
    return Trajectory(task, obs, mask, state, acts, _gripper_changes(acts), ok)


def gen_demos(
    task: TaskSpec,
    n: int = 20,
    noise: float = 0.3,
    seed: int = 0,
    n_obs: int = 5,
    max_retries: int = 20,
    clutter: tuple[int, int] = (1, 1),
) -> DemoSet:
    """``n`` successful expert demonstrations (rejection sampled, deterministic per seed)."""
    if n < 2:
        raise ContractError("need n >= 2 demonstrations")
    trajs = []
    for i in range(n):
        gen = RngStream(seed, 1_000 + 97 * task.task_token + i).generator()
        for _ in range(max_retries):
            tr = record_expert(task, make_scene(task, gen, clutter=clutter), n_obs, noise, gen)
            if tr.success:
                trajs.append(tr)
                break
        else:
            raise GenerationError(f"expert failed {max_retries} times on {task.name} (demo {i})")
    return DemoSet(trajs, task.name, seed)


# ---------------------------------------------------------------------------
# rollouts and evaluation

Policy = Callable[[Sequence[Scene]], np.ndarray]


def expert_policy(task: TaskSpec) -> Policy:
    return lambda scenes: np.stack([expert_action(s, task) for s in scenes])


def zero_policy(scenes: Sequence[Scene]) -> np.ndarray:
    return np.zeros((len(scenes), D_ACTION))


def model_policy(params: PolicyParams, task: TaskSpec, seed: int = 0) -> Policy:
    """Wrap a checkpoint as a closed-loop policy (flow heads draw from a seeded stream)."""
    eff = effective_tensors(params)
    n_obs = params.config.n_obs_tokens
    gen = RngStream(seed, 0xA11).generator()

    def act(scenes):
        batch = encode_batch(scenes, task, n_obs)
        try:
            return predict_action(params, batch, gen, eff=eff)
        except NumericFault:
            out = np.full((len(scenes), D_ACTION), np.nan)
            for i in range(len(scenes)):
                try:
                    out[i] = predict_action(params, batch.take([i]), gen, eff=eff)[0]
                except NumericFault as e:
                    log.warning("numeric fault in trial %d: %s", i, e)
            return out

    return act


def rollout_batch(policy: Policy, task: TaskSpec, scenes: Sequence[Scene], max_T: int | None = None):
    """Closed-loop rollouts of many scenes in lock-step.

    Returns ``(successes, scene_history)`` where ``scene_history[t]`` is the
    list of scenes *before* step t. A trial with a non-finite action is failed.
    """
    T = task.horizon if max_T is None else max_T
    cur = [s.copy() for s in scenes]
    done = np.array([is_success(s, task) for s in cur])
    failed = np.zeros(len(cur), bool)
    history = []
    for _ in range(T):
        history.append([s.copy() for s in cur])
        acts = np.asarray(policy(cur), float)
        for i, s in enumerate(cur):
            if failed[i]:
                continue
            if not np.all(np.isfinite(acts[i])):
                failed[i] = True
                log.warning("trial %d aborted: non-finite action", i)
                continue
            step(s, acts[i])
            done[i] = done[i] or is_success(s, task)
    history.append([s.copy() for s in cur])
    return done & ~failed, history


def rollout(policy: Policy, task: TaskSpec, scene0: Scene, max_T: int | None = None):
    ok, hist = rollout_batch(policy, task, [scene0], max_T)
    return [h[0] for h in hist], bool(ok[0])


@dataclass(frozen=True)
class EvalGrid:
    """5 x 8 lattice of target placements over the object rectangle."""

    seed: int = 0
    rows: int = GRID_ROWS
    cols: int = GRID_COLS

    def __post_init__(self):
        if self.rows * self.cols != 40:
            raise ContractError("the evaluation grid has exactly 40 cells")

    def positions(self) -> np.ndarray:
        xs = OBJ_X[0] + (np.arange(self.cols) + 0.5) * (OBJ_X[1] - OBJ_X[0]) / self.cols
        ys = OBJ_Y[0] + (np.arange(self.rows) + 0.5) * (OBJ_Y[1] - OBJ_Y[0]) / self.rows
        return np.array([(x, y) for y in ys for x in xs])

    def cell_stream(self, cell: int, what: int = 0) -> np.random.Generator:
        return RngStream(self.seed, 50_000 + 1_000 * what + cell).generator()

    def scenes(self, task: TaskSpec, perturbation: str = "none") -> list[Scene]:
        out = []
        for c, pos in enumerate(self.positions()):
            base = make_scene(task, self.cell_stream(c), target_pos=pos)
            out.append(perturb_scene(base, perturbation, self.cell_stream(c, 1)))
        return out


@dataclass
class EvalReport:
    task: str
    perturbation: str
    outcomes: list[bool]

    @property
    def rate(self) -> float:
        return sum(self.outcomes) / len(self.outcomes)

    @property
    def bitmap(self) -> str:
        return "".join("1" if o else "0" for o in self.outcomes)

    def to_dict(self) -> dict:
        return dict(task=self.task, perturbation=self.perturbation, bitmap=self.bitmap, successes=sum(self.outcomes),
                    trials=len(self.outcomes), rate=self.rate)


def eval_grid(
    policy: Policy | PolicyParams,
    task: TaskSpec,
    grid: EvalGrid | None = None,
    perturbation: str = "none",
    seed: int = 0,
) -> EvalReport:
    grid = grid or EvalGrid()
    if isinstance(policy, PolicyParams):
        policy = model_policy(policy, task, seed)
    ok, _ = rollout_batch(policy, task, grid.scenes(task, perturbation))
    return EvalReport(task.name, perturbation, [bool(x) for x in ok])

