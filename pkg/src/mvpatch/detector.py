"""Detector contract: a built-in differentiable toy detector and a bridge
client that delegates detection to an external process.

The toy detector slides a fixed grayscale template over the image and
scores each window by sigmoid(k * (ncc - b)), where ncc is the normalized
cross-correlation between the window and the template.  It is cheap,
deterministic, and has closed-form pixel gradients, which makes it a
stand-in for a neural person detector at test scale.

The bridge client speaks newline-delimited JSON to a spawned subprocess
(or a local socket), letting a real detector supply evaluation-mode
detections.  Bridges are eval-only; gradients never cross the wire.
"""

import json
import os
import shlex
import socket
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .imaging import BBox, read_png, write_png

TEMPLATE_SIZE = 16
DEFAULT_TEMPLATE_SEED = 7
PROTOCOL_VERSION = 1
_NCC_EPS = 1e-9


class DetectorError(Exception):
    pass


class ImageTooSmall(DetectorError):
    """Image smaller than the sliding template."""


class DetectorCapabilityError(DetectorError):
    """The selected detector cannot fill the requested role."""


class BridgeError(DetectorError):
    pass


class BridgeUnavailable(BridgeError):
    """The bridge process could not be reached or died mid-conversation."""


class ProtocolError(BridgeError):
    """The bridge replied with malformed or invalid protocol JSON."""


class VersionMismatch(BridgeError):
    """The bridge speaks a different protocol version."""


class BridgeRemoteError(BridgeError):
    """The bridge answered with a well-formed error reply."""


@dataclass(frozen=True)
class Detection:
    """One detector hit: box, confidence that it is an object, class name."""

    bbox: BBox
    objectness: float
    class_label: str = "person"

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be in [0, 1], got {self.objectness}")


@dataclass(frozen=True)
class ToyDetectorSpec:
    """Parameters of the sliding-template toy detector."""

    template: np.ndarray
    steepness: float = 10.0
    bias: float = 0.6
    stride: int = 8

    def __post_init__(self):
        tpl = np.asarray(self.template, dtype=float)
        if tpl.shape != (TEMPLATE_SIZE, TEMPLATE_SIZE):
            raise ValueError(f"template must be {TEMPLATE_SIZE}x{TEMPLATE_SIZE}")
        if tpl.min() < 0.0 or tpl.max() > 1.0:
            raise ValueError("template values must lie in [0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        tpl = tpl.copy()
        tpl.setflags(write=False)
        object.__setattr__(self, "template", tpl)

    @classmethod
    def from_seed(cls, seed=DEFAULT_TEMPLATE_SEED, steepness=10.0, bias=0.6, stride=8):
        tpl = np.random.default_rng(seed).random((TEMPLATE_SIZE, TEMPLATE_SIZE))
        return cls(template=tpl, steepness=steepness, bias=bias, stride=stride)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _window_scores(gray, spec):
    """Scores of all stride-aligned windows, plus intermediates for gradients."""
    h, w = gray.shape
    t = TEMPLATE_SIZE
    if h < t or w < t:
        raise ImageTooSmall(f"image {w}x{h} smaller than the {t}x{t} template")
    windows = np.lib.stride_tricks.sliding_window_view(gray, (t, t))[
        :: spec.stride, :: spec.stride
    ]
    tpl = spec.template
    dots = np.einsum("rcij,ij->rc", windows, tpl)
    norms = np.sqrt(np.einsum("rcij,rcij->rc", windows, windows))
    tnorm = float(np.sqrt(np.sum(tpl * tpl)))
    denom = norms * tnorm + _NCC_EPS
    corr = dots / denom
    scores = _sigmoid(spec.steepness * (corr - spec.bias))
    return windows, scores, dots, norms, denom, tnorm


def toy_detect(image, spec):
    """Run the sliding-template detector over an image.

    Grayscale is the RGB mean.  A detection is emitted for every window
    whose score is a local maximum within its 3x3 stride neighborhood and
    reaches 0.5.  Fully deterministic.
    """
    gray = image.data.mean(axis=2)
    _, scores, _, _, _, _ = _window_scores(gray, spec)
    rows, cols = scores.shape
    padded = np.full((rows + 2, cols + 2), -np.inf)
    padded[1:-1, 1:-1] = scores
    detections = []
    for r in range(rows):
        for c in range(cols):
            s = scores[r, c]
            if s < 0.5:
                continue
            neighborhood = padded[r : r + 3, c : c + 3]
            if s >= neighborhood.max():
                x = c * spec.stride
                y = r * spec.stride
                detections.append(
                    Detection(
                        bbox=BBox(float(x), float(y), float(x + TEMPLATE_SIZE), float(y + TEMPLATE_SIZE)),
                        objectness=float(s),
                        class_label="person",
                    )
                )
    return detections


def toy_max_objectness_grad(image, spec):
    """Maximum window score and its analytic gradient w.r.t. image pixels.

    The gradient is nonzero only inside the argmax window (ties broken by
    lowest row, then lowest column).
    """
    gray = image.data.mean(axis=2)
    windows, scores, dots, norms, denom, tnorm = _window_scores(gray, spec)
    flat = int(np.argmax(scores))
    r, c = np.unravel_index(flat, scores.shape)
    s = float(scores[r, c])

    win = windows[r, c]
    dot = dots[r, c]
    norm = norms[r, c]
    den = denom[r, c]
    # d(ncc)/d(window): template term minus the norm term; at a zero-norm
    # window the norm term's limit is zero.
    tpl_term = spec.template / den
    if norm > 0.0:
        norm_term = dot * tnorm * win / (norm * den * den)
    else:
        norm_term = np.zeros_like(win)
    dwin = s * (1.0 - s) * spec.steepness * (tpl_term - norm_term)

    grad = np.zeros_like(image.data)
    y = r * spec.stride
    x = c * spec.stride
    # grayscale was the channel mean, so each channel gets a third.
    grad[y : y + TEMPLATE_SIZE, x : x + TEMPLATE_SIZE, :] = dwin[..., None] / 3.0
    return s, grad


# ---------------------------------------------------------------------------
# detector contract implementations


class ToyDetector:
    """Grad-capable contract implementation backed by the toy detector."""

    capabilities = frozenset({"eval", "grad"})

    def __init__(self, spec=None):
        self.spec = spec if spec is not None else ToyDetectorSpec.from_seed()

    def detect(self, image):
        return toy_detect(image, self.spec)

    def detect_files(self, paths):
        return [self.detect(read_png(p)) for p in paths]

    def max_objectness_grad(self, image):
        return toy_max_objectness_grad(image, self.spec)

    def close(self):
        pass


@dataclass
class BridgeConfig:
    """How to reach a bridge process: a command line or a TCP address."""

    command: str = ""
    address: tuple = ()
    class_filter: str = "person"


class BridgeClient:
    """One protocol conversation: a single request in flight at a time."""

    def __init__(self, reader, writer, proc=None, sock=None):
        self._reader = reader
        self._writer = writer
        self._proc = proc
        self._sock = sock
        self._next_id = 1

    @classmethod
    def spawn(cls, command):
        try:
            proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise BridgeUnavailable(f"cannot spawn bridge '{command}': {exc}") from exc
        return cls(proc.stdout, proc.stdin, proc=proc)

    @classmethod
    def connect(cls, host, port):
        try:
            sock = socket.create_connection((host, port))
        except OSError as exc:
            raise BridgeUnavailable(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock.makefile("r"), sock.makefile("w"), sock=sock)

    def detect(self, image_paths, class_filter="person"):
        """Request detections for a list of image files, order preserving."""
        request_id = self._next_id
        self._next_id += 1
        request = {
            "v": PROTOCOL_VERSION,
            "id": request_id,
            "op": "detect",
            "images": [str(p) for p in image_paths],
            "class_filter": class_filter,
        }
        try:
            self._writer.write(json.dumps(request) + "\n")
            self._writer.flush()
            line = self._reader.readline()
        except (OSError, ValueError) as exc:
            raise BridgeUnavailable(f"bridge connection failed: {exc}") from exc
        if not line:
            raise BridgeUnavailable("bridge closed the connection")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"bridge reply is not valid JSON: {exc}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError("bridge reply is not a JSON object")
        version = reply.get("v")
        if version != PROTOCOL_VERSION:
            raise VersionMismatch(
                f"bridge speaks protocol version {version!r}, "
                f"expected {PROTOCOL_VERSION}"
            )
        if "error" in reply:
            raise BridgeRemoteError(str(reply["error"]))
        if reply.get("id") != request_id:
            raise ProtocolError(
                f"reply id {reply.get('id')!r} does not match request id {request_id}"
            )
        if "detections" not in reply:
            raise ProtocolError("reply missing the 'detections' field")
        per_image = reply["detections"]
        if not isinstance(per_image, list) or len(per_image) != len(image_paths):
            raise ProtocolError(
                f"expected {len(image_paths)} detection lists, "
                f"got {len(per_image) if isinstance(per_image, list) else type(per_image).__name__}"
            )
        return [
            [_parse_detection(d) for d in dets] for dets in per_image
        ]

    def close(self):
        for stream in (self._writer, self._reader):
            try:
                stream.close()
            except OSError:
                pass
        if self._proc is not None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        if self._sock is not None:
            self._sock.close()


def _parse_detection(obj):
    if not isinstance(obj, dict):
        raise ProtocolError("detection entry is not a JSON object")
    for key in ("xmin", "ymin", "xmax", "ymax", "objectness", "class"):
        if key not in obj:
            raise ProtocolError(f"detection missing the '{key}' field")
    try:
        bbox = BBox(
            float(obj["xmin"]), float(obj["ymin"]), float(obj["xmax"]), float(obj["ymax"])
        )
        return Detection(
            bbox=bbox,
            objectness=float(obj["objectness"]),
            class_label=str(obj["class"]),
        )
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"invalid detection values: {exc}") from exc


def bridge_detect(image_paths, config):
    """One-shot detection through a bridge described by a BridgeConfig."""
    if config.command:
        client = BridgeClient.spawn(config.command)
    elif config.address:
        client = BridgeClient.connect(*config.address)
    else:
        raise ValueError("BridgeConfig needs a command or an address")
    try:
        return client.detect(image_paths, class_filter=config.class_filter)
    finally:
        client.close()


class BridgeDetector:
    """Eval-only contract implementation that proxies to a bridge process."""

    capabilities = frozenset({"eval"})

    def __init__(self, config):
        self.config = config
        self._client = None

    def _ensure_client(self):
        if self._client is None:
            if self.config.command:
                self._client = BridgeClient.spawn(self.config.command)
            elif self.config.address:
                self._client = BridgeClient.connect(*self.config.address)
            else:
                raise ValueError("BridgeConfig needs a command or an address")
        return self._client

    def detect_files(self, paths):
        return self._ensure_client().detect(
            paths, class_filter=self.config.class_filter
        )

    def detect(self, image):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "frame.png")
            write_png(image, path)
            return self.detect_files([path])[0]

    def close(self):
        if self._client is not None:
            self._client.close()
            self._client = None
