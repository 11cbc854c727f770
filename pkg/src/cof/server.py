"""Small HTTP model server backed by the toy model, with fault injection.

Images are looked up by id in a registry filled at start-up, so clients send
ids instead of pixels. Run standalone with::

    python -m cof.server --seed 7 --n-tasks 200 --port 8765
"""

from __future__ import annotations

import argparse
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from cof.geometry import GeometryError, TokenMask
from cof.grounding import PromptBundle
from cof.pipeline import ToyBackend
from cof.toy_model import SyntheticImage

log = logging.getLogger(__name__)


@dataclass
class FaultPlan:
    """Misbehave on the first N requests: fail with ``status``, stall, or send garbage."""

    fail_first: int = 0
    status: int = 503
    stall_first: int = 0
    stall_seconds: float = 0.0
    garbage_first: int = 0


class ToyModelServer:
    def __init__(
        self,
        images: dict[str, SyntheticImage],
        backend: ToyBackend | None = None,
        faults: FaultPlan | None = None,
        supports_mask: bool = True,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.images = dict(images)
        self.backend = backend or ToyBackend()
        self.faults = faults or FaultPlan()
        self.supports_mask = supports_mask
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/infer"

    def start(self) -> ToyModelServer:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        # shutdown() blocks unless serve_forever is running
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join()
            self._thread = None
        self._httpd.server_close()

    def __enter__(self) -> ToyModelServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def handle(self, body: bytes) -> tuple[int, dict | bytes]:
        with self._lock:
            n = len(self.requests)
            try:
                request = json.loads(body)
            except ValueError:
                request = {"_unparsed": body.decode("utf-8", "replace")}
            self.requests.append(request)

        if n < self.faults.stall_first:
            time.sleep(self.faults.stall_seconds)
        if n < self.faults.fail_first:
            return self.faults.status, {"error": "injected_fault"}
        if n < self.faults.garbage_first:
            return 200, b"<html>not json</html>"
        return self._answer(request)

    def _answer(self, request: dict) -> tuple[int, dict]:
        if not isinstance(request, dict) or "_unparsed" in request:
            return 400, {"error": "bad_request", "detail": "body is not a JSON object"}
        mode = request.get("mode")
        image = self.images.get(request.get("image_id"))
        prompt = request.get("prompt")
        if image is None:
            return 404, {"error": "unknown_image", "detail": f"no image {request.get('image_id')!r}"}
        if not isinstance(prompt, str) or not prompt:
            return 400, {"error": "bad_request", "detail": "prompt must be a nonempty string"}

        if mode == "ground":
            return 200, {"text": self.backend.ground(image, PromptBundle(prompt, "", prompt))}
        if mode != "generate":
            return 400, {"error": "bad_request", "detail": f"unknown mode {mode!r}"}

        lam = request.get("lambda", 1.0)
        mask_json = request.get("mask")
        if mask_json is None:
            gen = self.backend.generate(image, prompt)
        elif not self.supports_mask:
            return 422, {"error": "capability_missing", "detail": "this server cannot apply attention masks"}
        else:
            try:
                mask = TokenMask.from_json(mask_json)
                gen = self.backend.generate_with_mask(image, prompt, mask, float(lam))
            except (GeometryError, ValueError, KeyError, TypeError) as exc:
                return 400, {"error": "bad_request", "detail": str(exc)}
        return 200, {"text": gen.text, "attention_mass": gen.attention_mass}

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                status, payload = server.handle(self.rfile.read(length))
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, fmt, *args):
                log.debug("%s - %s", self.address_string(), fmt % args)

        return Handler


def main(argv: list[str] | None = None) -> None:
    from cof.geometry import PatchGrid
    from cof.harness import generate_suite

    parser = argparse.ArgumentParser(description="Serve the toy model over HTTP for a seeded task suite.")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-tasks", type=int, default=200)
    parser.add_argument("--grid", default="4x4")
    parser.add_argument("--distractors", type=int, default=3)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--fail-first", type=int, default=0)
    parser.add_argument("--no-mask", action="store_true", help="reject masked generation requests")
    args = parser.parse_args(argv)

    suite = generate_suite(args.seed, args.n_tasks, PatchGrid.parse(args.grid), args.distractors)
    server = ToyModelServer(
        {t.image.image_id: t.image for t in suite},
        faults=FaultPlan(fail_first=args.fail_first),
        supports_mask=not args.no_mask,
        host=args.host,
        port=args.port,
    )
    print(f"serving {len(suite)} images at {server.url}", flush=True)
    try:
        server._httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._httpd.server_close()


if __name__ == "__main__":
    main()
