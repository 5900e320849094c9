"""HTTP adapter so a remote diffusion backend can stand in for the mixture.

Wire format (both directions JSON, ``application/json``)::

    request  {"t": int, "condition": str | null, "shape": [int, ...], "data": b64}
    response {"eps": b64}

Tensors travel as base64 of little-endian float32 in row-major order.
"""

import base64
import json
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .errors import InvalidArgument, ProtocolError, RemoteError, TransportError

MAX_BODY_BYTES = 64 * 1024 * 1024
_WIRE = np.dtype("<f4")


def encode_tensor(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype=_WIRE).tobytes()).decode("ascii")


def decode_tensor(text, shape):
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"bad base64 payload: {exc}") from exc
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != count * _WIRE.itemsize:
        raise ProtocolError(f"payload holds {len(raw) // _WIRE.itemsize} floats, expected {count}")
    return np.frombuffer(raw, dtype=_WIRE).reshape(shape).astype(np.float64)


def remote_denoise(endpoint, x_t, t, condition=None, timeout=30.0):
    if not float(t).is_integer():
        raise InvalidArgument("the wire protocol carries integer timesteps only")
    x_t = np.asarray(x_t)
    body = json.dumps({
        "t": int(t),
        "condition": condition,
        "shape": list(x_t.shape),
        "data": encode_tensor(x_t),
    }).encode("utf-8")
    if len(body) > MAX_BODY_BYTES:
        raise InvalidArgument("request exceeds the 64 MiB body limit")
    req = urllib.request.Request(
        endpoint, data=body, method="POST", headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read(MAX_BODY_BYTES + 1)
    except urllib.error.HTTPError as exc:
        raise RemoteError(exc.code, exc.read(2048).decode("utf-8", "replace")) from exc
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(str(exc)) from exc
    if len(payload) > MAX_BODY_BYTES:
        raise ProtocolError("response exceeds the 64 MiB body limit")
    try:
        doc = json.loads(payload)
        text = doc["eps"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed response: {exc}") from exc
    return decode_tensor(text, x_t.shape)


class RemoteDenoiser:
    """Denoiser interface backed by :func:`remote_denoise`."""

    def __init__(self, endpoint, condition=None, timeout=30.0):
        self.endpoint = endpoint
        self.condition = condition
        self.timeout = timeout

    def eps(self, x_t, t, sched):
        return remote_denoise(self.endpoint, x_t, t, self.condition, self.timeout)


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _reply(self, status, doc):
        out = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        if length > MAX_BODY_BYTES:
            self._reply(413, {"error": "body too large"})
            return
        try:
            doc = json.loads(self.rfile.read(length))
            shape = [int(s) for s in doc["shape"]]
            x = decode_tensor(doc["data"], shape)
            eps = self.server.eps_fn(x, int(doc["t"]), doc.get("condition"))
        except Exception as exc:  # noqa: BLE001 - any failure is the client's fault here
            self._reply(400, {"error": str(exc)})
            return
        self._reply(200, {"eps": encode_tensor(eps)})


def serve_denoiser(eps_fn, host="127.0.0.1", port=0):
    """Serve ``eps_fn(x, t, condition)`` on a background thread.

    Returns the server; its ``url`` attribute is the POST endpoint and
    ``shutdown()`` stops it.
    """
    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    server.eps_fn = eps_fn
    server.url = f"http://{host}:{server.server_address[1]}/eps"
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def gmm_eps_fn(gmm, sched):
    """Adapter exposing an analytic mixture through :func:`serve_denoiser`."""
    from .denoisers import gmm_eps

    def fn(x, t, condition):
        return gmm_eps(gmm, x, t, sched, condition)

    return fn
