"""Toy-scale versions of the chromaticity, shading and separation networks.

Every network owns an ordered ``params`` dict of leaf tensors and exposes a
``topology`` list describing its layers (kind, in/out channels, scale).
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, add, channels, concat, conv2d, relu, simplex_head, softplus, upsample2

ROLES = ("chromnet", "shadingnet", "separatenet", "singlenet")


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False, dtype=np.float32):
        self.name, self.cin, self.cout, self.k, self.stride = name, cin, cout, k, stride
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))
        self.w = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride)

    def describe(self) -> dict:
        kind = "stride2-conv" if self.stride == 2 else f"conv{self.k}x{self.k}"
        return {"name": self.name, "kind": kind, "in": self.cin, "out": self.cout}


class Net:
    role = ""
    in_channels = 0
    out_channels = 0

    def __init__(self):
        self.convs: list[Conv] = []
        self.topology: list[dict] = []

    def _conv(self, *args, **kwargs) -> Conv:
        c = Conv(*args, **kwargs)
        self.convs.append(c)
        return c

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for c in self.convs:
            out[c.w.name] = c.w
            out[c.b.name] = c.b
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"{self.role} expects {self.in_channels} channels, got {x.shape[1]}")
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class ChromNet(Net):
    """Image -> per-pixel reflectance chromaticity (3 channels on the simplex)."""

    role = "chromnet"
    in_channels = 3
    out_channels = 3

    def __init__(self, rng, dtype=np.float32, width: int = 16):
        super().__init__()
        w1, w2 = width, 2 * width
        self.c1 = self._conv("chromnet.c1", 3, w1, 3, rng, dtype=dtype)
        self.c2 = self._conv("chromnet.c2", w1, w2, 3, rng, stride=2, dtype=dtype)
        self.r1 = self._conv("chromnet.r1", w2, w2, 3, rng, dtype=dtype)
        self.r2 = self._conv("chromnet.r2", w2, w2, 3, rng, dtype=dtype)
        self.up = self._conv("chromnet.up", w2, w1, 3, rng, dtype=dtype)
        self.out = self._conv("chromnet.out", w1, 3, 3, rng, zero=True, dtype=dtype)
        self.topology = [
            self.c1.describe(), {"kind": "relu"}, self.c2.describe(), {"kind": "relu"},
            {**self.r1.describe(), "skip": "add"}, {"kind": "relu"},
            {**self.r2.describe(), "skip": "add"}, {"kind": "relu"},
            {"kind": "nearest-upsample2"}, self.up.describe(), {"kind": "relu"},
            self.out.describe(), {"kind": "simplex-head"},
        ]

    def forward(self, x):
        h = relu(self.c1(x))
        h = relu(self.c2(h))
        h = add(h, relu(self.r1(h)))
        h = add(h, relu(self.r2(h)))
        h = relu(self.up(upsample2(h)))
        return simplex_head(self.out(h))


class UNet(Net):
    """Three-level encoder/decoder with skip concatenations and a softplus head."""

    def __init__(self, role: str, cin: int, cout: int, rng, dtype=np.float32, width: int = 16):
        super().__init__()
        self.role, self.in_channels, self.out_channels = role, cin, cout
        w1, w2, w3 = width, 2 * width, 4 * width
        p = role
        self.e1 = self._conv(f"{p}.e1", cin, w1, 3, rng, dtype=dtype)
        self.e2 = self._conv(f"{p}.e2", w1, w2, 3, rng, stride=2, dtype=dtype)
        self.e3 = self._conv(f"{p}.e3", w2, w3, 3, rng, stride=2, dtype=dtype)
        self.mid = self._conv(f"{p}.mid", w3, w3, 3, rng, dtype=dtype)
        self.d2 = self._conv(f"{p}.d2", w3 + w2, w2, 3, rng, dtype=dtype)
        self.d1 = self._conv(f"{p}.d1", w2 + w1, w1, 3, rng, dtype=dtype)
        self.out = self._conv(f"{p}.out", w1, cout, 3, rng, dtype=dtype)
        self.topology = [
            self.e1.describe(), {"kind": "relu"}, self.e2.describe(), {"kind": "relu"},
            self.e3.describe(), {"kind": "relu"}, self.mid.describe(), {"kind": "relu"},
            {"kind": "nearest-upsample2"}, {"kind": "concat", "with": f"{p}.e2"}, self.d2.describe(), {"kind": "relu"},
            {"kind": "nearest-upsample2"}, {"kind": "concat", "with": f"{p}.e1"}, self.d1.describe(), {"kind": "relu"},
            self.out.describe(), {"kind": "softplus"},
        ]

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"{self.role} needs height and width divisible by 4, got {x.shape[2:]}")
        f1 = relu(self.e1(x))
        f2 = relu(self.e2(f1))
        f3 = relu(self.e3(f2))
        f3 = relu(self.mid(f3))
        g2 = relu(self.d2(concat([upsample2(f3), f2])))
        g1 = relu(self.d1(concat([upsample2(g2), f1])))
        return softplus(self.out(g1))

    def bottleneck(self, x):
        f1 = relu(self.e1(x))
        f2 = relu(self.e2(f1))
        return relu(self.mid(relu(self.e3(f2))))


def ShadingNet(rng, dtype=np.float32, width: int = 16) -> UNet:
    """Image (+) chromaticity (6 channels) -> two RGB illuminant shadings."""
    return UNet("shadingnet", 6, 6, rng, dtype, width)


def SingleNet(rng, dtype=np.float32, width: int = 16) -> UNet:
    """Baseline: image straight to two separated images."""
    return UNet("singlenet", 3, 6, rng, dtype, width)


class SeparateNet(Net):
    """Purely per-pixel: shadings (+) image (9 channels) -> two images (6 channels)."""

    role = "separatenet"
    in_channels = 9
    out_channels = 6

    def __init__(self, rng, dtype=np.float32, width: int = 32):
        super().__init__()
        self.p1 = self._conv("separatenet.p1", 9, width, 1, rng, dtype=dtype)
        self.p2 = self._conv("separatenet.p2", width, width, 1, rng, dtype=dtype)
        self.p3 = self._conv("separatenet.p3", width, 6, 1, rng, dtype=dtype)
        self.topology = [self.p1.describe(), {"kind": "relu"}, self.p2.describe(), {"kind": "relu"},
                         self.p3.describe(), {"kind": "softplus"}]

    def forward(self, x):
        h = relu(self.p1(x))
        h = relu(self.p2(h))
        return softplus(self.p3(h))


def split_pair(x: Tensor) -> tuple[Tensor, Tensor]:
    return channels(x, 0, 3), channels(x, 3, 6)


def receptive_field(topology: list[dict]) -> int:
    """Receptive field (pixels) at the bottleneck: convs up to the first upsample.

    Stride-2 convs double the jump between neighbouring output pixels.
    """
    rf, jump = 1, 1
    for layer in topology:
        kind = layer["kind"]
        if kind == "nearest-upsample2":
            break
        if kind.startswith("conv") or kind == "stride2-conv":
            k = 3 if kind in ("conv3x3", "stride2-conv") else 1
            rf += (k - 1) * jump
            if kind == "stride2-conv":
                jump *= 2
    return rf


BUILDERS = {
    "chromnet": ChromNet,
    "shadingnet": ShadingNet,
    "separatenet": SeparateNet,
    "singlenet": SingleNet,
}
