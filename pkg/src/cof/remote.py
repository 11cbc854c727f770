"""JSON-over-HTTP client for a model server.

Request body::

    {"mode": "ground" | "generate", "prompt": str, "image_id": str,
     "mask": {"rows": R, "cols": C, "bits": "0101..."} (optional),
     "lambda": float (optional, server default 1.0)}

Response body: ``{"text": str}``, optionally with ``"attention_mass"``.
Timeouts and non-2xx replies are retried (3 attempts, exponential backoff
from 250 ms). A 4xx reply whose ``error`` is ``"capability_missing"`` is not
retried and raises :class:`CapabilityMissing`.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Callable

import requests

from cof.geometry import TokenMask
from cof.grounding import PromptBundle
from cof.pipeline import Backend, Generation
from cof.toy_model import SyntheticImage

log = logging.getLogger(__name__)

ENV_ENDPOINT = "COF_ENDPOINT"
ENV_TIMEOUT = "COF_TIMEOUT"
DEFAULT_TIMEOUT = 10.0
MAX_ATTEMPTS = 3
BACKOFF_START = 0.25


class TransportError(RuntimeError):
    pass


class RemoteTimeout(TransportError):
    pass


class MalformedResponse(TransportError):
    pass


class CapabilityMissing(RuntimeError):
    """The server does not support a requested feature (e.g. masked generation)."""


def build_request(
    mode: str,
    prompt: str,
    image_id: str,
    mask: TokenMask | None = None,
    lam: float | None = None,
) -> dict:
    if mode not in ("ground", "generate"):
        raise ValueError(f"unknown mode {mode!r}")
    request = {"mode": mode, "prompt": prompt, "image_id": image_id}
    if mask is not None:
        request["mask"] = mask.to_json()
    if lam is not None:
        request["lambda"] = lam
    return request


def _parse_reply(response: requests.Response) -> dict:
    try:
        body = response.json()
    except ValueError as exc:
        raise MalformedResponse(f"response is not JSON: {response.text[:200]!r}") from exc
    if not isinstance(body, dict) or not isinstance(body.get("text"), str):
        raise MalformedResponse(f"response lacks a 'text' string: {body!r}")
    return body


def remote_backend_call(
    endpoint: str,
    request: dict,
    timeout: float = DEFAULT_TIMEOUT,
    attempts: int = MAX_ATTEMPTS,
    backoff: float = BACKOFF_START,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST ``request`` to ``endpoint`` and return the decoded reply."""
    http = session or requests
    last_error: TransportError | None = None
    for attempt in range(attempts):
        if attempt:
            delay = backoff * 2 ** (attempt - 1)
            log.warning("retry %d/%d for %s in %.2fs: %s", attempt, attempts - 1, endpoint, delay, last_error)
            sleep(delay)
        try:
            response = http.post(endpoint, json=request, timeout=timeout)
        except requests.Timeout:
            last_error = RemoteTimeout(f"timed out after {timeout}s")
            continue
        except requests.RequestException as exc:
            last_error = TransportError(str(exc))
            continue

        if 400 <= response.status_code < 500:
            try:
                error = response.json().get("error")
            except (ValueError, AttributeError):
                error = None
            if error == "capability_missing":
                raise CapabilityMissing(response.json().get("detail", "server rejected the request"))
        if not 200 <= response.status_code < 300:
            last_error = TransportError(f"HTTP {response.status_code} from {endpoint}")
            continue
        return _parse_reply(response)
    raise last_error


class RemoteBackend(Backend):
    name = "remote"

    def __init__(self, endpoint: str | None = None, timeout: float | None = None, sleep=time.sleep):
        endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise ValueError(f"no endpoint given and ${ENV_ENDPOINT} is unset")
        self.endpoint = endpoint
        self.timeout = timeout if timeout is not None else float(os.environ.get(ENV_TIMEOUT, DEFAULT_TIMEOUT))
        self.session = requests.Session()
        self._sleep = sleep

    def config(self) -> dict:
        return {"endpoint": self.endpoint, "timeout": self.timeout}

    def _post(self, request: dict) -> dict:
        return remote_backend_call(self.endpoint, request, self.timeout, session=self.session, sleep=self._sleep)

    def ground(self, image: SyntheticImage, bundle: PromptBundle) -> str:
        return self._post(build_request("ground", bundle.combined, image.image_id))["text"]

    def generate(self, image: SyntheticImage, prompt: str) -> Generation:
        reply = self._post(build_request("generate", prompt, image.image_id))
        return Generation(reply["text"], reply.get("attention_mass"))

    def generate_with_mask(self, image, prompt, mask, lam, layer_range=None) -> Generation:
        if layer_range is not None:
            raise CapabilityMissing("the remote protocol has no layer-range field")
        reply = self._post(build_request("generate", prompt, image.image_id, mask, lam))
        return Generation(reply["text"], reply.get("attention_mass"))
