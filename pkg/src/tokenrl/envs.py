"""Deterministic toy pixel-control environments and image augmentation.

Each environment renders flat-shaded 84x84 RGB frames from its physical
state (a pure function), stacks 3 consecutive frames into an 84x84x9
uint8 observation (oldest frame first along the channel axis), applies
each action `action_repeat` raw physics steps, and runs episodes of 1000
raw steps. Dense rewards are in [0,1] per raw step; sparse variants pay
1 only inside the goal set.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

IMAGE_SIZE = 84
EPISODE_RAW_STEPS = 1000


# ---------------------------------------------------------------------------
# random-shift augmentation

def apply_shift(img: np.ndarray, dx: int, dy: int, pad: int = 4) -> np.ndarray:
    """Shift an (H, W, C) image by (dx, dy), filling with replicated borders.

    The output at (y, x) is the padded input at (y + pad + dy, x + pad + dx).
    """
    h, w = img.shape[:2]
    if not (-pad <= dx <= pad and -pad <= dy <= pad):
        raise ValueError(f"shift ({dx}, {dy}) outside +-{pad}")
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad + dy : pad + dy + h, pad + dx : pad + dx + w]


def random_shift(img: np.ndarray, pad: int = 4, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random +-pad pixel shift with replicated borders (DrQ-style crop)."""
    rng = rng or np.random.default_rng()
    dx = int(rng.integers(-pad, pad + 1))
    dy = int(rng.integers(-pad, pad + 1))
    return apply_shift(img, dx, dy, pad)


def random_shift_batch(x: torch.Tensor, pad: int, generator: torch.Generator) -> torch.Tensor:
    """Per-sample random shifts for a (B, C, H, W) float batch."""
    b, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
    offsets = torch.randint(0, 2 * pad + 1, (b, 2), generator=generator)
    out = [
        padded[i, :, oy : oy + h, ox : ox + w]
        for i, (oy, ox) in enumerate(offsets.tolist())
    ]
    return torch.stack(out)


# ---------------------------------------------------------------------------
# frame stacking

class FrameStack:
    """Keeps the last 3 frames; reset replicates the first frame 3x."""

    def __init__(self, num_frames: int = 3):
        self.frames: deque[np.ndarray] = deque(maxlen=num_frames)
        self.num_frames = num_frames

    def reset(self, frame: np.ndarray):
        self.frames.clear()
        for _ in range(self.num_frames):
            self.frames.append(frame)

    def push(self, frame: np.ndarray):
        if not self.frames:
            raise RuntimeError("push before reset")
        self.frames.append(frame)

    def observation(self) -> np.ndarray:
        """(84, 84, 9) uint8, oldest frame in channels 0..2."""
        return np.concatenate(list(self.frames), axis=-1)


def obs_to_tensor(obs: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 9) -> float (..., 9, H, W) scaled to [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(obs)).to(dtype) / 255.0
    return t.movedim(-1, -3)


# ---------------------------------------------------------------------------
# rasterization helpers (pure, integer pixel ops)

def _blank(color: tuple[int, int, int]) -> np.ndarray:
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = color
    return img

def _fill_rect(img: np.ndarray, y0: int, y1: int, x0: int, x1: int, color):
    y0, y1 = max(0, y0), min(IMAGE_SIZE, y1)
    x0, x1 = max(0, x0), min(IMAGE_SIZE, x1)
    if y0 < y1 and x0 < x1:
        img[y0:y1, x0:x1] = color

def _draw_line(img: np.ndarray, p0, p1, color, thickness: int = 2):
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    steps = max(2, int(length * 2))
    for i in range(steps + 1):
        t = i / steps
        x = p0[0] + t * (p1[0] - p0[0])
        y = p0[1] + t * (p1[1] - p0[1])
        _fill_rect(img, int(y), int(y) + thickness, int(x), int(x) + thickness, color)

def _draw_disk(img: np.ndarray, cx: float, cy: float, radius: float, color):
    x0, x1 = int(cx - radius) - 1, int(cx + radius) + 2
    y0, y1 = int(cy - radius) - 1, int(cy + radius) + 2
    for y in range(max(0, y0), min(IMAGE_SIZE, y1)):
        for x in range(max(0, x0), min(IMAGE_SIZE, x1)):
            if (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2:
                img[y, x] = color


# ---------------------------------------------------------------------------
# environments

@dataclass
class EnvSpec:
    name: str
    action_dim: int
    action_repeat: int
    sparse: bool


class PixelEnv:
    """Base: action repeat, frame stacking, episode accounting, clamping."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.stack = FrameStack()
        self.raw_steps = 0
        self.done = True
        self.clamp_warnings = 0

    # subclass contract -----------------------------------------------------
    def _init_state(self, rng: np.random.Generator):
        raise NotImplementedError

    def _physics_step(self, action: np.ndarray):
        raise NotImplementedError

    def _reward(self) -> float:
        raise NotImplementedError

    def render(self) -> np.ndarray:
        raise NotImplementedError

    # public API ------------------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        self._init_state(np.random.default_rng(seed))
        self.raw_steps = 0
        self.done = False
        self.stack.reset(self.render())
        return self.stack.observation()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise RuntimeError("step() after episode end; call reset()")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if np.any(np.abs(action) > 1.0):
            self.clamp_warnings += 1
            action = np.clip(action, -1.0, 1.0)
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            self._physics_step(action)
            reward += self._reward()
            self.raw_steps += 1
            if self.raw_steps >= EPISODE_RAW_STEPS:
                self.done = True
                break
        self.stack.push(self.render())
        return self.stack.observation(), reward, self.done


class PixelCartpole(PixelEnv):
    """Cart on a rail with an unactuated pole; 1-dim force action.

    Tasks: balance / balance-sparse start near upright, swingup /
    swingup-sparse start with the pole pointing down.
    """

    GRAVITY = 9.8
    CART_MASS = 1.0
    POLE_MASS = 0.1
    POLE_HALF_LEN = 0.5
    FORCE_MAG = 10.0
    DT = 0.02
    X_LIMIT = 2.4

    def __init__(self, task: str, sparse: bool):
        name = f"cartpole-{task}" + ("-sparse" if sparse else "")
        super().__init__(EnvSpec(name, action_dim=1, action_repeat=8, sparse=sparse))
        self.swingup = task.startswith("swingup")
        self.x = self.x_dot = self.theta = self.theta_dot = 0.0

    def _init_state(self, rng: np.random.Generator):
        self.x = float(rng.uniform(-0.1, 0.1))
        self.x_dot = float(rng.uniform(-0.01, 0.01))
        base = math.pi if self.swingup else 0.0
        self.theta = base + float(rng.uniform(-0.05, 0.05))
        self.theta_dot = float(rng.uniform(-0.01, 0.01))

    def _physics_step(self, action: np.ndarray):
        force = self.FORCE_MAG * float(action[0])
        total_mass = self.CART_MASS + self.POLE_MASS
        ml = self.POLE_MASS * self.POLE_HALF_LEN
        sin_t, cos_t = math.sin(self.theta), math.cos(self.theta)
        temp = (force + ml * self.theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.POLE_HALF_LEN * (4.0 / 3.0 - self.POLE_MASS * cos_t ** 2 / total_mass)
        )
        x_acc = temp - ml * theta_acc * cos_t / total_mass
        # semi-implicit Euler with mild angular damping to keep states bounded
        self.theta_dot = max(-8.0, min(8.0, 0.999 * (self.theta_dot + self.DT * theta_acc)))
        self.x_dot = max(-5.0, min(5.0, self.x_dot + self.DT * x_acc))
        self.theta = math.atan2(
            math.sin(self.theta + self.DT * self.theta_dot),
            math.cos(self.theta + self.DT * self.theta_dot),
        )
        self.x += self.DT * self.x_dot
        if abs(self.x) > self.X_LIMIT:
            self.x = math.copysign(self.X_LIMIT, self.x)
            self.x_dot = 0.0

    # goal set: pole within ~18 deg of upright, cart within half the rail
    SPARSE_COS = 0.95
    SPARSE_X = 1.2
    DENSE_GOAL_THRESHOLD = 0.7  # dense reward is >= this wherever sparse pays 1

    def _dense_reward(self) -> float:
        # Fourth power keeps the reward sharply peaked at upright: a pole
        # swinging through the top collects almost nothing, so uncontrolled
        # policies score low while a balanced pole stays near 1.
        upright = (math.cos(self.theta) + 1.0) / 2.0
        centered = 1.0 - 0.4 * min(abs(self.x) / self.X_LIMIT, 1.0)
        return upright ** 4 * centered

    def _reward(self) -> float:
        if self.spec.sparse:
            in_goal = math.cos(self.theta) > self.SPARSE_COS and abs(self.x) < self.SPARSE_X
            return 1.0 if in_goal else 0.0
        return self._dense_reward()

    def render(self) -> np.ndarray:
        img = _blank((235, 235, 240))
        _fill_rect(img, 62, 64, 0, IMAGE_SIZE, (120, 120, 120))            # rail
        cart_x = 42.0 + (self.x / self.X_LIMIT) * 30.0
        _fill_rect(img, 55, 63, int(cart_x) - 6, int(cart_x) + 6, (40, 60, 200))
        tip = (cart_x + 28.0 * math.sin(self.theta), 56.0 - 28.0 * math.cos(self.theta))
        _draw_line(img, (cart_x, 56.0), tip, (210, 50, 40), thickness=2)
        return img


class PixelReacher(PixelEnv):
    """Two-link planar arm reaching a fixed target; 2-dim torque action.

    The target sphere is large for `easy` and small for `hard`.
    """

    DT = 0.02
    TORQUE = 8.0
    DAMPING = 2.0
    LINK = 0.5  # both links; max reach 1.0

    def __init__(self, task: str):
        super().__init__(EnvSpec(f"reacher-{task}", action_dim=2, action_repeat=4, sparse=False))
        self.radius = 0.30 if task == "easy" else 0.10
        self.q = np.zeros(2)
        self.q_dot = np.zeros(2)
        self.target = np.zeros(2)

    def _init_state(self, rng: np.random.Generator):
        self.q = rng.uniform(-math.pi, math.pi, size=2)
        self.q_dot = np.zeros(2)
        angle = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(0.4, 0.95)
        self.target = dist * np.array([math.cos(angle), math.sin(angle)])

    def _physics_step(self, action: np.ndarray):
        q_acc = self.TORQUE * action - self.DAMPING * self.q_dot
        self.q_dot = np.clip(self.q_dot + self.DT * q_acc, -8.0, 8.0)
        self.q = np.arctan2(np.sin(self.q + self.DT * self.q_dot),
                            np.cos(self.q + self.DT * self.q_dot))

    def _tip(self) -> np.ndarray:
        a1 = self.q[0]
        a2 = self.q[0] + self.q[1]
        return np.array([
            self.LINK * math.cos(a1) + self.LINK * math.cos(a2),
            self.LINK * math.sin(a1) + self.LINK * math.sin(a2),
        ])

    def _dist(self) -> float:
        return float(np.linalg.norm(self._tip() - self.target))

    def _reward(self) -> float:
        d = self._dist()
        if d <= self.radius:
            return 1.0
        # linear falloff outside the target sphere
        return max(0.0, 1.0 - (d - self.radius) / (2.0 - self.radius))

    def render(self) -> np.ndarray:
        img = _blank((240, 238, 230))
        scale, cx, cy = 32.0, 42.0, 42.0
        tx = cx + scale * self.target[0]
        ty = cy + scale * self.target[1]
        _draw_disk(img, tx, ty, self.radius * scale, (60, 180, 70))
        a1 = self.q[0]
        a2 = self.q[0] + self.q[1]
        elbow = (cx + scale * self.LINK * math.cos(a1), cy + scale * self.LINK * math.sin(a1))
        tip = (elbow[0] + scale * self.LINK * math.cos(a2), elbow[1] + scale * self.LINK * math.sin(a2))
        _draw_line(img, (cx, cy), elbow, (50, 50, 160), thickness=3)
        _draw_line(img, elbow, tip, (160, 60, 40), thickness=3)
        _fill_rect(img, int(tip[1]) - 1, int(tip[1]) + 3, int(tip[0]) - 1, int(tip[0]) + 3, (20, 20, 20))
        return img


ENV_REGISTRY = {
    "cartpole-balance": lambda: PixelCartpole("balance", sparse=False),
    "cartpole-balance-sparse": lambda: PixelCartpole("balance", sparse=True),
    "cartpole-swingup": lambda: PixelCartpole("swingup", sparse=False),
    "cartpole-swingup-sparse": lambda: PixelCartpole("swingup", sparse=True),
    "reacher-easy": lambda: PixelReacher("easy"),
    "reacher-hard": lambda: PixelReacher("hard"),
}


def make_env(name: str) -> PixelEnv:
    if name not in ENV_REGISTRY:
        raise KeyError(f"unknown env {name!r}; known: {sorted(ENV_REGISTRY)}")
    return ENV_REGISTRY[name]()
