"""FastAPI app implementing the guidance wire protocol.

Endpoints:
  POST /v1/encode_prompt {prompt} -> {prompt_id}
  POST /v1/predict_noise {image_b64, height, width, t, prompt_id|null,
                          pose_image_b64, seed} -> {eps_b64}
  GET  /v1/health -> {status, model}

Bodies are validated by hand so every rejection is a 400 naming the
offending field; framework-level 422s never reach the client. The
protocol is stateless apart from the prompt store, and one worker
serves requests serially.
"""

import base64
import binascii
import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .backends import load_backend

MAX_SIDE = 4096
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass
class ServiceConfig:
    model: str = "mock-diffusion"
    device: str = "cpu"
    port: int = 8501
    prompt_cache_size: int = 1024
    mock: bool = True

    def __post_init__(self):
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        if self.prompt_cache_size < 1:
            raise ValueError("prompt_cache_size must be at least 1")


class _Rejection(Exception):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


def _require(body, field, types, nullable=False):
    if field not in body:
        raise _Rejection(field, "missing")
    value = body[field]
    if value is None:
        if nullable:
            return None
        raise _Rejection(field, "must not be null")
    # bool passes isinstance(int) checks and is never what a client meant
    if isinstance(value, bool) or not isinstance(value, types):
        want = "/".join(t.__name__ for t in types)
        raise _Rejection(field, f"expected {want}, got {type(value).__name__}")
    return value


def _b64_field(body, field):
    text = _require(body, field, (str,))
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError):
        raise _Rejection(field, "not valid base64") from None


def prompt_identifier(prompt):
    return "p" + hashlib.sha256(prompt.encode()).hexdigest()[:16]


def create_app(config=None):
    config = config or ServiceConfig()
    backend = load_backend(config)
    app = FastAPI(title="guidance-service")
    prompts = OrderedDict()  # prompt_id -> prompt text, LRU-bounded

    @app.exception_handler(_Rejection)
    async def _reject(request, exc):
        return JSONResponse(
            status_code=400,
            content={"detail": {"field": exc.field, "message": exc.message}},
        )

    async def _json_body(request):
        try:
            return await request.json()
        except Exception:
            raise _Rejection("body", "invalid JSON") from None

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "model": config.model}

    @app.post("/v1/encode_prompt")
    async def encode_prompt(request: Request):
        body = await _json_body(request)
        prompt = _require(body, "prompt", (str,))
        prompt_id = prompt_identifier(prompt)
        prompts[prompt_id] = prompt
        prompts.move_to_end(prompt_id)
        while len(prompts) > config.prompt_cache_size:
            prompts.popitem(last=False)
        return {"prompt_id": prompt_id}

    @app.post("/v1/predict_noise")
    async def predict_noise(request: Request):
        body = await _json_body(request)
        height = _require(body, "height", (int,))
        width = _require(body, "width", (int,))
        for field, value in (("height", height), ("width", width)):
            if not 1 <= value <= MAX_SIDE:
                raise _Rejection(field, f"must be in [1, {MAX_SIDE}]")
        t = _require(body, "t", (int,))
        if t < 0:
            raise _Rejection("t", "must be non-negative")
        seed = _require(body, "seed", (int,))

        prompt_id = _require(body, "prompt_id", (str,), nullable=True)
        prompt = None
        if prompt_id is not None:
            if prompt_id not in prompts:
                raise _Rejection("prompt_id", f"unknown id {prompt_id!r}")
            prompt = prompts[prompt_id]

        image = _b64_field(body, "image_b64")
        expected = height * width * 3 * 4
        if len(image) != expected:
            raise _Rejection(
                "image_b64",
                f"decoded to {len(image)} bytes, expected {expected} "
                f"(float32 {height}x{width}x3)")
        pose = _b64_field(body, "pose_image_b64")
        if not pose.startswith(PNG_MAGIC):
            raise _Rejection("pose_image_b64", "not a PNG")

        eps = backend.predict(height, width, t, prompt, seed)
        raw = np.ascontiguousarray(eps, dtype="<f4").tobytes()
        return {"eps_b64": base64.b64encode(raw).decode("ascii")}

    return app
