"""Score distillation: diffusion schedule, noising, and the adaptive
classifier/noise score split.

Guidance comes from abstract providers. The remote provider speaks the HTTP
wire protocol of the guidance service; the synthetic provider is a
closed-form oracle whose conditional prediction is the exact posterior noise
toward a known target image, which makes distillation equivalent to a scaled
photometric loss and therefore testable offline.

Images cross the provider boundary in the diffusion working range [-1, 1];
renders in [0, 1] are mapped with to_working_range first.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .io import png_bytes


class GuidanceUnavailableError(RuntimeError):
    """Transient transport failure after exhausting retries; skippable."""


class GuidanceProtocolError(RuntimeError):
    """The provider answered outside the wire contract; fatal."""


def seeded_noise_field(seed, height, width):
    """Deterministic standard-normal noise image for a seed.

    Shared between the trainer and noise-echoing providers, so an
    unconditional prediction can reproduce the injected noise bit for bit
    from the seed alone.
    """
    rng = np.random.default_rng(int(seed))
    return rng.standard_normal((height, width, 3))


def to_working_range(image01):
    """Map [0, 1] pixels to the [-1, 1] diffusion working range."""
    return 2.0 * np.asarray(image01, dtype=np.float64) - 1.0


@dataclass
class DiffusionSchedule:
    """Linear-beta DDPM schedule with an annealed sampling ceiling.

    alpha_bar[t] is the cumulative product of (1 - beta) through step t,
    with alpha_bar[0] = 1; valid timesteps are 1..t_max. After
    anneal_iteration the sampling ceiling drops from t_max to anneal_max.
    """

    t_max: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 0.012
    t_min: int = 20
    anneal_iteration: int = 1000
    anneal_max: int = 500
    weight_mode: str = "constant"  # or "one_minus_alpha_bar"
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.t_min <= self.anneal_max <= self.t_max:
            raise ValueError("need 0 < t_min <= anneal_max <= t_max")
        if self.weight_mode not in ("constant", "one_minus_alpha_bar"):
            raise ValueError(f"unknown weight mode: {self.weight_mode!r}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.t_max)
        self.alpha_bar = np.concatenate([[1.0],
                                         np.cumprod(1.0 - self.betas)])

    def current_max(self, iteration):
        if iteration >= self.anneal_iteration:
            return self.anneal_max
        return self.t_max

    def sample_timestep(self, iteration, rng):
        """Uniform integer timestep in [t_min, current ceiling]."""
        return int(rng.integers(self.t_min, self.current_max(iteration) + 1))

    def weight(self, t):
        """SDS weighting w(t)."""
        if self.weight_mode == "constant":
            return 1.0
        return float(1.0 - self.alpha_bar[t])


def sample_timestep(schedule, iteration, rng):
    return schedule.sample_timestep(iteration, rng)


def add_noise(schedule, x, t, eps):
    """Forward-diffuse a working-range image: sqrt(ab)x + sqrt(1-ab)eps."""
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


@dataclass
class ASDConfig:
    """Adaptive score split: below tau only the classifier score survives."""

    guidance_scale: float = 22.5
    tau: int = 450
    # the below-tau classifier branch keeps the guidance scale by default;
    # False reproduces the bare (unscaled) classifier direction
    scale_classifier_below_tau: bool = True

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def asd_delta(eps_cond, eps_uncond, eps, t, cfg):
    """Adaptive score-distillation residual.

    delta_n = eps_uncond - eps (noise score), delta_c = eps_cond -
    eps_uncond (classifier score); below tau the noise term is dropped.
    """
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if not (eps_cond.shape == eps_uncond.shape == eps.shape):
        raise ValueError("score component shapes differ")
    delta_c = eps_cond - eps_uncond
    if t < cfg.tau:
        if cfg.scale_classifier_below_tau:
            return cfg.guidance_scale * delta_c
        return delta_c.copy()
    delta_n = eps_uncond - eps
    return delta_n + cfg.guidance_scale * delta_c


def sds_gradient(delta, weight, backward_fn, image_shape):
    """Inject w(t)*delta as the image gradient of a cached render.

    backward_fn is the caller-assembled chain (renderer backward, possibly
    composed with the deformation backward) mapping dL/dC to parameter
    gradients.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != tuple(image_shape):
        raise ValueError(
            f"delta shape {delta.shape} does not match render {image_shape}")
    return backward_fn(weight * delta)


class SyntheticPhotometricGuidance:
    """Closed-form oracle provider distilling toward a known target.

    Conditional prediction is the exact posterior noise toward the target,
    (x_t - sqrt(ab) target) / sqrt(1 - ab); the unconditional prediction
    replays the injected noise from its seed, so the noise score is zero and
    the score residual points from the render toward the target.

    target may be a [0,1] image or a callable(context) -> image evaluated at
    begin_iteration, for per-pose targets.
    """

    def __init__(self, schedule, target):
        self.schedule = schedule
        self._target_source = target
        self._target_work = None
        if not callable(target):
            self._target_work = to_working_range(target)

    def begin_iteration(self, context):
        if callable(self._target_source):
            self._target_work = to_working_range(self._target_source(context))

    def encode_prompt(self, prompt):
        return f"synthetic:{prompt}"

    def predict_noise(self, x_t, t, prompt_id, pose_image, seed):
        h, w = x_t.shape[:2]
        if prompt_id is None:
            return seeded_noise_field(seed, h, w)
        if self._target_work is None:
            raise ValueError("per-pose target provider used before "
                             "begin_iteration")
        if self._target_work.shape != x_t.shape:
            raise ValueError("target resolution does not match the render")
        ab = self.schedule.alpha_bar[t]
        return (x_t - np.sqrt(ab) * self._target_work) / np.sqrt(1.0 - ab)


class RemoteGuidance:
    """HTTP client for the guidance service wire protocol.

    Transport failures are retried; exhausting the budget raises
    GuidanceUnavailableError so the trainer can skip the iteration. Any
    response outside the schema raises GuidanceProtocolError and is fatal.
    """

    def __init__(self, base_url, timeout=30.0, retries=2, session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self._session = session or requests.Session()
        self._prompt_cache = {}

    def _post(self, path, payload):
        import requests

        url = f"{self.base_url}{path}"
        last = None
        for _ in range(self.retries + 1):
            try:
                resp = self._session.post(url, json=payload,
                                          timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = RuntimeError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise GuidanceProtocolError(
                    f"{path} answered {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except (json.JSONDecodeError, ValueError) as exc:
                raise GuidanceProtocolError(f"{path}: non-JSON body") from exc
        raise GuidanceUnavailableError(
            f"{path} unreachable after {self.retries + 1} attempts: {last}")

    def health(self):
        import requests

        try:
            resp = self._session.get(f"{self.base_url}/v1/health",
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise GuidanceUnavailableError(str(exc)) from exc
        if resp.status_code != 200:
            raise GuidanceProtocolError(f"health answered {resp.status_code}")
        return resp.json()

    def begin_iteration(self, context):
        pass

    def encode_prompt(self, prompt):
        if prompt not in self._prompt_cache:
            body = self._post("/v1/encode_prompt", {"prompt": prompt})
            if "prompt_id" not in body:
                raise GuidanceProtocolError("encode_prompt: no prompt_id")
            self._prompt_cache[prompt] = body["prompt_id"]
        return self._prompt_cache[prompt]

    def predict_noise(self, x_t, t, prompt_id, pose_image, seed):
        x_t = np.asarray(x_t, dtype=np.float64)
        h, w = x_t.shape[:2]
        payload = {
            "image_b64": base64.b64encode(
                x_t.astype("<f4").tobytes()).decode("ascii"),
            "height": h,
            "width": w,
            "t": int(t),
            "prompt_id": prompt_id,
            "pose_image_b64": base64.b64encode(
                png_bytes(pose_image)).decode("ascii"),
            "seed": int(seed),
        }
        body = self._post("/v1/predict_noise", payload)
        if "eps_b64" not in body:
            raise GuidanceProtocolError("predict_noise: no eps_b64")
        try:
            raw = base64.b64decode(body["eps_b64"], validate=True)
        except Exception as exc:
            raise GuidanceProtocolError("predict_noise: bad base64") from exc
        eps = np.frombuffer(raw, dtype="<f4")
        if eps.size != h * w * 3:
            raise GuidanceProtocolError(
                f"predict_noise: expected {h * w * 3} floats, got {eps.size}")
        return eps.reshape(h, w, 3).astype(np.float64)
