"""U-Net generator and conditional CNN discriminator built from the layers module.

Layer strings use the "nAsB" notation: ``n64s2`` is a block of 64 filters with
stride 2. Encoder blocks are 3x3 conv + BatchNorm + LeakyReLU; decoder blocks
swap the conv for a 4x4 stride-2 transposed conv.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from desmoke.errors import ArgumentError, ShapeError
from desmoke.neuro.layers import (
    LEAKY_SLOPE,
    BatchNorm2d,
    Conv2d,
    Deconv2d,
    LeakyReLU,
    Sequential,
    TanhOut,
)

LAYER_KINDS = ("conv3x3", "deconv4x4", "batchnorm", "leaky_relu", "tanh_out")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    stride: int = 1
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ArgumentError("stride must be 1 or 2")

    def notation(self):
        return f"n{self.filters}s{self.stride}"


@dataclass(frozen=True)
class NetworkSpec:
    image_channels: int = 3
    generator_filters: tuple = (16, 32, 64)
    discriminator_filters: tuple = (16, 32, 64)
    tap_layers: tuple = (0, 1, 2)
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if not self.generator_filters or not self.discriminator_filters:
            raise ArgumentError("networks need at least one block")
        if any(i < 0 or i >= len(self.discriminator_filters) for i in self.tap_layers):
            raise ArgumentError(f"tap layers {self.tap_layers} out of range")

    @property
    def depth(self):
        return len(self.generator_filters)

    def generator_layers(self):
        """(encoder, decoder) lists of LayerSpec, mirroring the block structure."""
        enc, dec = [], []
        for f in self.generator_filters:
            enc += [LayerSpec("conv3x3", f, 2), LayerSpec("batchnorm", f), LayerSpec("leaky_relu", f, 1, self.leaky_slope)]
        outs = list(reversed(self.generator_filters[:-1])) + [self.image_channels]
        for j, f in enumerate(outs):
            dec.append(LayerSpec("deconv4x4", f, 2))
            if j < len(outs) - 1:
                dec += [LayerSpec("batchnorm", f), LayerSpec("leaky_relu", f, 1, self.leaky_slope)]
            else:
                dec.append(LayerSpec("tanh_out", f))
        return enc, dec

    def describe(self):
        enc, dec = self.generator_layers()
        g = " ".join(s.notation() for s in enc + dec if s.kind in ("conv3x3", "deconv4x4"))
        d = " ".join(f"n{f}s2" for f in self.discriminator_filters)
        return f"G: {g} | D: {d} -> n1s1 -> mean -> sigmoid"

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _conv_block(cin, cout, slope, rng):
    return Sequential(Conv2d(cin, cout, 3, 2, 1, rng), BatchNorm2d(cout, rng), LeakyReLU(slope))


class Network:
    """Shared parameter bookkeeping: ``self.blocks`` maps name -> Sequential."""

    blocks: dict

    def layers(self):
        for bname, block in self.blocks.items():
            for i, layer in enumerate(block.layers):
                yield f"{bname}.{i}", layer

    def named_params(self):
        for lname, layer in self.layers():
            for key in sorted(layer.params):
                yield f"{lname}.{key}", layer, key

    def named_buffers(self):
        for lname, layer in self.layers():
            for key in sorted(layer.buffers):
                yield f"{lname}.{key}", layer, key

    def zero_grad(self):
        for block in self.blocks.values():
            block.zero_grad()

    def param_count(self):
        return sum(layer.params[key].size for _, layer, key in self.named_params())

    def state(self):
        out = {name: layer.params[key] for name, layer, key in self.named_params()}
        out.update({name: layer.buffers[key] for name, layer, key in self.named_buffers()})
        return out

    def load_state(self, state):
        for name, layer, key in self.named_params():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != layer.params[key].shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {layer.params[key].shape}")
            layer.params[key] = arr.copy()
        for name, layer, key in self.named_buffers():
            layer.buffers[key] = np.asarray(state[name], dtype=np.float64).copy()


class Generator(Network):
    def __init__(self, spec, rng=None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.blocks = {}
        cin = spec.image_channels
        for i, f in enumerate(spec.generator_filters):
            self.blocks[f"enc{i}"] = _conv_block(cin, f, spec.leaky_slope, rng)
            cin = f
        filters = spec.generator_filters
        depth = spec.depth
        for j in range(depth):
            cin = filters[-1] if j == 0 else filters[depth - 1 - j] * 2
            if j < depth - 1:
                cout = filters[depth - 2 - j]
                self.blocks[f"dec{j}"] = Sequential(
                    Deconv2d(cin, cout, 4, 2, 1, rng), BatchNorm2d(cout, rng), LeakyReLU(spec.leaky_slope)
                )
            else:
                self.blocks[f"dec{j}"] = Sequential(Deconv2d(cin, spec.image_channels, 4, 2, 1, rng), TanhOut())

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.image_channels:
            raise ShapeError(f"generator expects (N, {self.spec.image_channels}, H, W), got {x.shape}")
        div = 2**self.spec.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {div}")

    def forward(self, x, train=True):
        self.check_input(x)
        depth = self.spec.depth
        skips = []
        h = x
        for i in range(depth):
            h = self.blocks[f"enc{i}"].forward(h, train)
            skips.append(h)
        self._split = []
        d = skips[-1]
        for j in range(depth):
            if j > 0:
                skip = skips[depth - 1 - j]
                self._split.append(d.shape[1])
                d = np.concatenate([d, skip], axis=1)
            d = self.blocks[f"dec{j}"].forward(d, train)
        return d

    def backward(self, dout):
        """Backpropagate d loss / d output; returns d loss / d input and fills parameter grads."""
        depth = self.spec.depth
        dskips = [None] * depth
        g = dout
        for j in reversed(range(depth)):
            g = self.blocks[f"dec{j}"].backward(g)
            if j > 0:
                c = self._split[j - 1]
                dskips[depth - 1 - j] = g[:, c:]
                g = g[:, :c]
        dskips[-1] = g
        g = None
        for i in reversed(range(depth)):
            upstream = dskips[i] if g is None else g + dskips[i]
            g = self.blocks[f"enc{i}"].backward(upstream)
        return g


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


class Discriminator(Network):
    """Conditional classifier over (condition, candidate) pairs concatenated on channels."""

    def __init__(self, spec, rng=None):
        rng = rng or np.random.default_rng(1)
        self.spec = spec
        self.blocks = {}
        cin = 2 * spec.image_channels
        for i, f in enumerate(spec.discriminator_filters):
            self.blocks[f"blk{i}"] = _conv_block(cin, f, spec.leaky_slope, rng)
            cin = f
        self.blocks["head"] = Sequential(Conv2d(cin, 1, 3, 1, 1, rng))

    def forward(self, pair, train=True):
        """Returns (probabilities (N,), logits (N,), tap activations)."""
        if pair.ndim != 4 or pair.shape[1] != 2 * self.spec.image_channels:
            raise ShapeError(f"discriminator expects (N, {2 * self.spec.image_channels}, H, W), got {pair.shape}")
        taps = []
        h = pair
        for i in range(len(self.spec.discriminator_filters)):
            h = self.blocks[f"blk{i}"].forward(h, train)
            if i in self.spec.tap_layers:
                taps.append(h)
        head = self.blocks["head"].forward(h, train)
        self._head_shape = head.shape
        logits = head.mean(axis=(1, 2, 3))
        return sigmoid(logits), logits, taps

    def backward(self, dlogits, dtaps=None):
        """Backprop from d loss / d logits (N,) plus optional tap gradients; returns d loss / d pair."""
        n, c, h, w = self._head_shape
        g = np.broadcast_to((dlogits / (c * h * w))[:, None, None, None], self._head_shape).copy()
        g = self.blocks["head"].backward(g)
        tap_index = {layer: k for k, layer in enumerate(self.spec.tap_layers)}
        for i in reversed(range(len(self.spec.discriminator_filters))):
            if dtaps is not None and i in tap_index and dtaps[tap_index[i]] is not None:
                g = g + dtaps[tap_index[i]]
            g = self.blocks[f"blk{i}"].backward(g)
        return g


def generator_forward(net, x, train=True):
    return net.forward(x, train)


def discriminator_forward(net, condition, candidate, train=True):
    return net.forward(np.concatenate([condition, candidate], axis=1), train)
