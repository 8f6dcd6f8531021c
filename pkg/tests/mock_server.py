"""Threaded HTTP stand-in for a residual service."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np


class MockResidualServer:
    """Serves POST /v1/residual.

    ``mode`` picks the reply: "synthetic" (image - reference), "zeros",
    or one of the corruptions used by the protocol tests.
    """

    def __init__(self, reference=None, mode="synthetic", delay=0.0):
        self.reference = None if reference is None else np.asarray(reference, dtype=np.float64)
        self.mode = mode
        self.delay = delay
        self.requests = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                server.requests.append((self.path, body))
                if server.delay:
                    time.sleep(server.delay)
                status, payload = server.reply(self.path, body)
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}"

    def reply(self, path, body):
        if path != "/v1/residual":
            return 404, {"error": "not found"}
        image = np.asarray(body["image"], dtype=np.float64)
        n = image.size
        mode = self.mode
        if mode == "synthetic":
            ref = self.reference.reshape(-1)
            return 200, {"residual": (image - ref).tolist(), "note": "ignored"}
        if mode == "zeros":
            return 200, {"residual": [0.0] * n}
        if mode == "short":
            return 200, {"residual": [0.0] * (n - 1)}
        if mode == "not-json":
            return 200, b"<html>oops</html>"
        if mode == "missing":
            return 200, {"eps": [0.0] * n}
        if mode == "strings":
            return 200, {"residual": ["a"] * n}
        if mode == "nan":
            return 200, b'{"residual": [NaN' + b", 0.0" * (n - 1) + b"]}"
        if mode == "error":
            return 503, {"error": "busy"}
        raise AssertionError(mode)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
