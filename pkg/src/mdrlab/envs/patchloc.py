"""Synthetic patch-localisation task on procedurally generated images.

The agent sees three views (target patch, whole image, current window), pans
and zooms a window over the image, and is paid the IoU between its window
and the target when it confirms. The target window holds a distinctive disc
so that it can be found from the downsampled global view.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

UP, DOWN, LEFT, RIGHT, ZOOM_IN, ZOOM_OUT, CONFIRM = range(7)
ACTION_NAMES = ("up", "down", "left", "right", "zoom_in", "zoom_out", "confirm")
MAX_ZOOM = 2


@lru_cache(maxsize=8)
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    yy.flags.writeable = xx.flags.writeable = False
    return yy, xx


def make_world(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    """Gradient + gaussian blobs + pixel noise, clipped to [0, 1]."""
    yy, xx = _grid(size)
    img = np.empty((size, size, channels))
    for c in range(channels):
        theta = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.25 * (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5))
    n_blobs = int(rng.integers(4, 9))
    params = np.empty((n_blobs, 3))
    colors = np.empty((n_blobs, channels))
    for k in range(n_blobs):
        params[k, :2] = rng.uniform(0, 1, size=2)
        params[k, 2] = rng.uniform(0.04, 0.2)
        colors[k] = rng.uniform(-0.6, 0.6, size=channels)
    # isotropic gaussians factor into row and column profiles
    axis = yy[:, 0]
    inv = 1.0 / (2 * params[:, 2:3] ** 2)
    gy = np.exp(-(axis[None, :] - params[:, 0:1]) ** 2 * inv)
    gx = np.exp(-(axis[None, :] - params[:, 1:2]) ** 2 * inv)
    img += np.einsum("ky,kx,kc->yxc", gy, gx, colors, optimize=True)
    img += rng.normal(0, 0.08, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def paint_object(img: np.ndarray, top: int, left: int, size: int, radius: float,
                 color: np.ndarray) -> None:
    """Draw a filled disc centred in the window (top, left, size), in place."""
    r = int(np.ceil(radius))
    cy, cx = top + size / 2 - 0.5, left + size / 2 - 0.5
    y0, x0 = max(int(cy) - r, 0), max(int(cx) - r, 0)
    y1, x1 = min(int(cy) + r + 2, img.shape[0]), min(int(cx) + r + 2, img.shape[1])
    yy, xx = np.mgrid[y0:y1, x0:x1]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    img[y0:y1, x0:x1][disc] = color


def iou(a: tuple[int, int, int], b: tuple[int, int, int]) -> float:
    """IoU of two square windows given as (top, left, size)."""
    at, al, asz = a
    bt, bl, bsz = b
    h = max(0, min(at + asz, bt + bsz) - max(at, bt))
    w = max(0, min(al + asz, bl + bsz) - max(al, bl))
    inter = h * w
    union = asz * asz + bsz * bsz - inter
    return inter / union


class PatchLocEnv:
    """Seven-action window navigation over an ``H x H`` synthetic image."""

    n_actions = 7

    def __init__(self, image_size: int = 64, view_size: int = 16, channels: int = 3,
                 max_steps: int = 20, step_cost: float = 0.01, object_radius: float = 5.0,
                 shaping: float = 0.0, seed: int = 0):
        if image_size % 4 or (image_size // 4) % view_size:
            raise ValueError("image_size/4 must be a multiple of view_size")
        self.H = image_size
        self.v = view_size
        self.c = channels
        self.max_steps = max_steps
        self.step_cost = step_cost
        self.object_radius = object_radius
        self.shaping = shaping
        self._seeds = np.random.default_rng(seed)
        self.image: np.ndarray | None = None

    @property
    def observation_shape(self) -> tuple[int, int, int, int]:
        return (3, self.v, self.v, self.c)

    @property
    def optimal_return(self) -> float:
        """Return of a teleporting oracle that confirms on the target at once."""
        return 1.0 - self.step_cost

    def window_size(self, zoom: int) -> int:
        return self.H >> zoom

    def _clamp_center(self, c: int, size: int) -> int:
        return int(min(max(c, size // 2), self.H - size // 2))

    def window(self) -> tuple[int, int, int]:
        s = self.window_size(self.zoom)
        return (self.y - s // 2, self.x - s // 2, s)

    def reset(self, seed: int | None = None):
        if seed is None:
            seed = int(self._seeds.integers(2**63))
        rng = np.random.default_rng(seed)
        self.image = make_world(rng, self.H, self.c)
        tz = int(rng.integers(1, MAX_ZOOM + 1))
        s = self.window_size(tz)
        stride = s // 4
        n = (self.H - s) // stride + 1
        ty, tx = (s // 2 + stride * int(k) for k in rng.integers(0, n, size=2))
        self.target_zoom = tz
        self.target = (ty - s // 2, tx - s // 2, s)
        if self.object_radius > 0:
            color = np.zeros(self.c)
            color[0] = 1.0
            paint_object(self.image, *self.target, self.object_radius, color)
        self.y = self.x = self.H // 2
        self.zoom = 0
        self.t = 0
        self.done = False
        self._iou = iou(self.window(), self.target)
        self._pooled = {}
        for z in range(MAX_ZOOM + 1):
            f = self.window_size(z) // self.v
            n = self.H // f
            self._pooled[f] = self.image.reshape(n, f, n, f, self.c).mean(axis=(1, 3))
        self._target_view = self._view(self.target)
        self._global_view = self._view((0, 0, self.H))
        return self._obs()

    def _view(self, win: tuple[int, int, int]) -> np.ndarray:
        top, left, s = win
        f = s // self.v
        if top % f == 0 and left % f == 0:
            return self._pooled[f][top // f:top // f + self.v, left // f:left // f + self.v]
        crop = self.image[top:top + s, left:left + s]
        return crop.reshape(self.v, f, self.v, f, self.c).mean(axis=(1, 3))

    def _obs(self) -> np.ndarray:
        return np.stack([self._target_view, self._global_view, self._view(self.window())])

    def step(self, action: int):
        if self.image is None or self.done:
            raise RuntimeError("step() called before reset() or after episode end")
        if not (0 <= int(action) < self.n_actions) or int(action) != action:
            raise ValueError(f"invalid action {action!r}")
        action = int(action)
        self.t += 1
        s = self.window_size(self.zoom)
        stride = max(s // 4, 1)
        if action == UP:
            self.y = self._clamp_center(self.y - stride, s)
        elif action == DOWN:
            self.y = self._clamp_center(self.y + stride, s)
        elif action == LEFT:
            self.x = self._clamp_center(self.x - stride, s)
        elif action == RIGHT:
            self.x = self._clamp_center(self.x + stride, s)
        elif action == ZOOM_IN and self.zoom < MAX_ZOOM:
            self.zoom += 1
        elif action == ZOOM_OUT and self.zoom > 0:
            self.zoom -= 1
            s = self.window_size(self.zoom)
            self.y = self._clamp_center(self.y, s)
            self.x = self._clamp_center(self.x, s)
        reward = -self.step_cost
        overlap = iou(self.window(), self.target)
        # optional dense term: change in IoU caused by this move (zero on confirm)
        reward += self.shaping * (overlap - self._iou)
        self._iou = overlap
        if action == CONFIRM or self.t >= self.max_steps:
            reward += overlap
            self.done = True
        info = {"iou": overlap, "truncated": False, "zoom": self.zoom}
        return self._obs(), reward, self.done, info


def scripted_action(env: PatchLocEnv) -> int:
    """Near-optimal policy with access to the target: zoom, pan, confirm."""
    ty, tx = env.target[0] + env.target[2] // 2, env.target[1] + env.target[2] // 2
    if env.zoom < env.target_zoom:
        return ZOOM_IN
    if env.zoom > env.target_zoom:
        return ZOOM_OUT
    if env.y > ty:
        return UP
    if env.y < ty:
        return DOWN
    if env.x > tx:
        return LEFT
    if env.x < tx:
        return RIGHT
    return CONFIRM
