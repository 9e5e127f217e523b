"""Dual-stream selective-kernel classifier with fusable asymmetric convs.

Building blocks:

* ``Acb`` - parallel 3x3 / 1x3 / 3x1 convolutions, each with its own batch
  norm, summed and passed through Swish.  For inference the three branches
  fold exactly into one 3x3 convolution plus bias (``fuse``).
* ``SkAcbBlock`` - three dilated ACB branches (d = 1, 2, 4) combined by a
  split-fuse-select attention that assigns each channel a convex weight
  over the branches.
* ``SkaNet`` - a deep TFI stream (stem + four SK-ACB stages), a lightweight
  PSD stream (two plain ACB stages), squeeze-excitation gating over the
  concatenated embeddings, and a softmax classifier head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .seeding import make_rng

VARIANTS = ("full", "no_sk_acb", "no_psd_stream", "no_se_fusion")


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 224
    stft_stem: int = 32
    stft_stages: tuple = (64, 128, 256, 512)
    psd_stem: int = 64
    psd_stages: tuple = (64, 128)
    se_reduction: int = 16
    head_hidden: int = 256
    num_classes: int = 9
    dropout_p: float = 0.6

    def __post_init__(self) -> None:
        if self.input_side < 16:
            raise ValueError("input_side must be >= 16")
        if len(self.stft_stages) != 4 or len(self.psd_stages) != 2:
            raise ValueError("expected 4 TFI stages and 2 PSD stages")
        if self.psd_stages[-1] > self.stft_stages[-1]:
            raise ValueError("PSD embedding must not exceed the TFI embedding")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk_scale(cls) -> "ModelConfig":
        return cls.scaled(divisor=4, input_side=64)

    @classmethod
    def scaled(cls, divisor: int, input_side: int, head_hidden: int = 256) -> "ModelConfig":
        """Width-reduced variant: every channel count divided, topology intact."""
        d = divisor
        return cls(
            input_side=input_side,
            stft_stem=max(1, 32 // d),
            stft_stages=tuple(max(1, c // d) for c in (64, 128, 256, 512)),
            psd_stem=max(1, 64 // d),
            psd_stages=tuple(max(1, c // d) for c in (64, 128)),
            head_hidden=head_hidden,
        )


def reduce_dim(channels: int) -> int:
    """Attention descriptor width for a block of the given channel count."""
    return max(channels // 16, 16)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d:
    def __init__(self, name, c_in, c_out, kh, kw, stride=1, padding=(0, 0),
                 dilation=1, bias=False, *, dtype, init_seed):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        rng = make_rng(init_seed, "param", name + ".kernel")
        self.kernel = T.parameter(
            _he_normal(rng, (c_out, c_in, kh, kw), c_in * kh * kw, dtype),
            name + ".kernel",
        )
        self.bias = None
        if bias:
            self.bias = T.parameter(np.zeros(c_out, dtype=dtype), name + ".bias")

    def forward(self, x):
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.padding,
                        self.dilation)

    def parameters(self):
        yield self.kernel
        if self.bias is not None:
            yield self.bias

    @property
    def geometry(self):
        c_out, c_in, kh, kw = self.kernel.shape
        return dict(kind="conv", name=self.name, c_in=c_in, c_out=c_out, kh=kh, kw=kw,
                    stride=self.stride, padding=self.padding, dilation=self.dilation)


class BatchNorm2d:
    def __init__(self, name, channels, *, dtype, init_seed, momentum=0.1, eps=1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.parameter(np.ones(channels, dtype=dtype), name + ".gamma")
        self.beta = T.parameter(np.zeros(channels, dtype=dtype), name + ".beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_tracked = 0

    def forward(self, x, training):
        if training:
            self.batches_tracked += 1
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.momentum, self.eps)

    def fold(self):
        """Per-channel (scale, shift) equivalent to eval-mode normalization."""
        if self.batches_tracked == 0:
            raise ValueError(
                f"{self.name}: running statistics unpopulated; run training batches "
                "before folding"
            )
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - self.running_mean * scale
        return scale, shift

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield self.name + ".running_mean", self.running_mean
        yield self.name + ".running_var", self.running_var


class Linear:
    def __init__(self, name, n_in, n_out, bias=True, *, dtype, init_seed):
        self.name = name
        rng = make_rng(init_seed, "param", name + ".weight")
        self.weight = T.parameter(
            _he_normal(rng, (n_out, n_in), n_in, dtype), name + ".weight"
        )
        self.bias = None
        if bias:
            self.bias = T.parameter(np.zeros(n_out, dtype=dtype), name + ".bias")

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    @property
    def geometry(self):
        n_out, n_in = self.weight.shape
        return dict(kind="linear", name=self.name, n_in=n_in, n_out=n_out)


class Acb:
    """Asymmetric convolution block: 3x3 + 1x3 + 3x1, each batch-normed.

    The asymmetric branches pad only along their long axis so all three
    outputs align spatially before summation.
    """

    def __init__(self, name, c_in, c_out, dilation=1, *, dtype, init_seed):
        d = dilation
        self.name = name
        self.dilation = d
        self.conv3x3 = Conv2d(name + ".k3x3", c_in, c_out, 3, 3, padding=(d, d),
                              dilation=d, dtype=dtype, init_seed=init_seed)
        self.conv1x3 = Conv2d(name + ".k1x3", c_in, c_out, 1, 3, padding=(0, d),
                              dilation=d, dtype=dtype, init_seed=init_seed)
        self.conv3x1 = Conv2d(name + ".k3x1", c_in, c_out, 3, 1, padding=(d, 0),
                              dilation=d, dtype=dtype, init_seed=init_seed)
        self.bn3x3 = BatchNorm2d(name + ".bn3x3", c_out, dtype=dtype, init_seed=init_seed)
        self.bn1x3 = BatchNorm2d(name + ".bn1x3", c_out, dtype=dtype, init_seed=init_seed)
        self.bn3x1 = BatchNorm2d(name + ".bn3x1", c_out, dtype=dtype, init_seed=init_seed)
        self.fused_kernel = None
        self.fused_bias = None

    @property
    def is_fused(self):
        return self.fused_kernel is not None

    def forward(self, x, training, pre_activation=False):
        if self.is_fused:
            if training:
                raise ValueError(f"{self.name}: fused blocks are inference-only")
            out = T.conv2d(
                x, T.Tensor(self.fused_kernel), T.Tensor(self.fused_bias),
                stride=1, padding=(self.dilation, self.dilation), dilation=self.dilation,
            )
        else:
            out = T.add(
                T.add(
                    self.bn3x3.forward(self.conv3x3.forward(x), training),
                    self.bn1x3.forward(self.conv1x3.forward(x), training),
                ),
                self.bn3x1.forward(self.conv3x1.forward(x), training),
            )
        if pre_activation:
            return out
        return T.swish(out)

    def fuse(self):
        """Fold branch batch norms and sum kernels into one 3x3 conv + bias."""
        kernel, bias = fuse_acb_branches(
            self.conv3x3.kernel.data, self.bn3x3,
            self.conv1x3.kernel.data, self.bn1x3,
            self.conv3x1.kernel.data, self.bn3x1,
        )
        self.fused_kernel = kernel
        self.fused_bias = bias
        return kernel, bias

    def parameters(self):
        if self.is_fused:
            return
        for layer in (self.conv3x3, self.conv1x3, self.conv3x1,
                      self.bn3x3, self.bn1x3, self.bn3x1):
            yield from layer.parameters()

    def buffers(self):
        if self.is_fused:
            yield self.name + ".fused.kernel", self.fused_kernel
            yield self.name + ".fused.bias", self.fused_bias
            return
        for bn in (self.bn3x3, self.bn1x3, self.bn3x1):
            yield from bn.buffers()

    def geometry(self, fused_acb=True):
        if fused_acb:
            c_out, c_in, _, _ = self.conv3x3.kernel.shape
            yield dict(kind="conv", name=self.name + ".fused", c_in=c_in, c_out=c_out,
                       kh=3, kw=3, stride=1, padding=(self.dilation, self.dilation),
                       dilation=self.dilation)
        else:
            for conv in (self.conv3x3, self.conv1x3, self.conv3x1):
                yield conv.geometry


def fuse_acb_branches(k3x3, bn3x3, k1x3, bn1x3, k3x1, bn3x1):
    """Kernel-level fusion: fold each BN, pad asymmetric kernels, sum.

    The 1x3 kernel lands in the center row and the 3x1 kernel in the center
    column of the 3x3 grid; folded shifts add into a single bias vector.
    """
    s3, b3 = bn3x3.fold()
    s13, b13 = bn1x3.fold()
    s31, b31 = bn3x1.fold()
    kernel = k3x3 * s3[:, None, None, None]
    padded_1x3 = np.zeros_like(kernel)
    padded_1x3[:, :, 1:2, :] = k1x3 * s13[:, None, None, None]
    padded_3x1 = np.zeros_like(kernel)
    padded_3x1[:, :, :, 1:2] = k3x1 * s31[:, None, None, None]
    return kernel + padded_1x3 + padded_3x1, b3 + b13 + b31


class SkAcbBlock:
    """Three dilated ACB branches picked per channel by a softmax attention."""

    DILATIONS = (1, 2, 4)

    def __init__(self, name, c_in, c_out, *, dtype, init_seed):
        self.name = name
        self.channels = c_out
        self.branches = [
            Acb(f"{name}.branch{i + 1}", c_in, c_out, dilation=d,
                dtype=dtype, init_seed=init_seed)
            for i, d in enumerate(self.DILATIONS)
        ]
        d_reduce = reduce_dim(c_out)
        self.reduce = Linear(name + ".reduce", c_out, d_reduce, dtype=dtype,
                             init_seed=init_seed)
        self.attn = [
            Linear(f"{name}.attn{tag}", d_reduce, c_out, bias=False, dtype=dtype,
                   init_seed=init_seed)
            for tag in ("_a", "_b", "_c")
        ]

    def forward(self, x, training):
        outs = [branch.forward(x, training) for branch in self.branches]
        pooled = T.global_avg_pool(T.add(T.add(outs[0], outs[1]), outs[2]))
        descriptor = T.relu(self.reduce.forward(pooled))
        weights = self.attention_weights(descriptor)
        b, c = pooled.shape
        mixed = None
        for w, u in zip(weights, outs):
            term = T.mul(T.reshape(w, (b, c, 1, 1)), u)
            mixed = term if mixed is None else T.add(mixed, term)
        return mixed

    def attention_weights(self, descriptor):
        """Per-channel 3-way softmax over the branch logits."""
        logits = [a.forward(descriptor) for a in self.attn]
        shift = np.maximum(
            np.maximum(logits[0].data, logits[1].data), logits[2].data
        )  # constant shift: softmax and its gradient are shift-invariant
        exps = [T.exp(T.add(l, T.Tensor(-shift))) for l in logits]
        denom = T.add(T.add(exps[0], exps[1]), exps[2])
        return [T.div(e, denom) for e in exps]

    def fuse(self):
        for branch in self.branches:
            branch.fuse()

    def parameters(self):
        for branch in self.branches:
            yield from branch.parameters()
        yield from self.reduce.parameters()
        for a in self.attn:
            yield from a.parameters()

    def buffers(self):
        for branch in self.branches:
            yield from branch.buffers()

    def geometry(self, fused_acb=True):
        for branch in self.branches:
            yield from branch.geometry(fused_acb)
        yield self.reduce.geometry
        for a in self.attn:
            yield a.geometry


class PlainAcbBlock:
    """Single ACB with a static receptive field (dilation 1)."""

    def __init__(self, name, c_in, c_out, *, dtype, init_seed):
        self.name = name
        self.channels = c_out
        self.acb = Acb(name + ".acb", c_in, c_out, dilation=1, dtype=dtype,
                       init_seed=init_seed)

    def forward(self, x, training):
        return self.acb.forward(x, training)

    def fuse(self):
        self.acb.fuse()

    def parameters(self):
        yield from self.acb.parameters()

    def buffers(self):
        yield from self.acb.buffers()

    def geometry(self, fused_acb=True):
        yield from self.acb.geometry(fused_acb)


class ConvBnSwish:
    """Conv + BN + Swish unit used for stems and stride-2 downsampling."""

    def __init__(self, name, c_in, c_out, stride, *, dtype, init_seed):
        self.name = name
        self.conv = Conv2d(name + ".conv", c_in, c_out, 3, 3, stride=stride,
                           padding=(1, 1), dtype=dtype, init_seed=init_seed)
        self.bn = BatchNorm2d(name + ".bn", c_out, dtype=dtype, init_seed=init_seed)

    def forward(self, x, training):
        return T.swish(self.bn.forward(self.conv.forward(x), training))

    def parameters(self):
        yield from self.conv.parameters()
        yield from self.bn.parameters()

    def buffers(self):
        yield from self.bn.buffers()

    def geometry(self):
        yield self.conv.geometry


class Stream:
    """Stem plus (block, stride-2 downsample) stages ending in global pooling."""

    def __init__(self, name, stem_channels, stage_channels, block_cls, *,
                 dtype, init_seed):
        self.name = name
        self.stem = ConvBnSwish(name + ".stem", 1, stem_channels, stride=2,
                                dtype=dtype, init_seed=init_seed)
        self.stages = []
        c_prev = stem_channels
        for i, c in enumerate(stage_channels):
            block = block_cls(f"{name}.stage{i + 1}.block", c_prev, c,
                              dtype=dtype, init_seed=init_seed)
            down = ConvBnSwish(f"{name}.stage{i + 1}.down", c, c, stride=2,
                               dtype=dtype, init_seed=init_seed)
            self.stages.append((block, down))
            c_prev = c
        self.out_channels = c_prev

    def forward(self, x, training):
        h = self.stem.forward(x, training)
        for block, down in self.stages:
            h = down.forward(block.forward(h, training), training)
        return T.global_avg_pool(h)

    def fuse(self):
        for block, _ in self.stages:
            block.fuse()

    def parameters(self):
        yield from self.stem.parameters()
        for block, down in self.stages:
            yield from block.parameters()
            yield from down.parameters()

    def buffers(self):
        yield from self.stem.buffers()
        for block, down in self.stages:
            yield from block.buffers()
            yield from down.buffers()

    def geometry(self, side, fused_acb=True):
        rows = []
        for g in self.stem.geometry():
            side = T.conv_output_size(side, 3, 2, 1, 1)
            rows.append({**g, "out_h": side, "out_w": side})
        for block, down in self.stages:
            for g in block.geometry(fused_acb):
                rows.append({**g, "out_h": side, "out_w": side})
            for g in down.geometry():
                side = T.conv_output_size(side, 3, 2, 1, 1)
                rows.append({**g, "out_h": side, "out_w": side})
        return rows


class SeFusion:
    """Bottleneck gate over the concatenated embeddings (sigmoid excitation)."""

    def __init__(self, name, channels, reduction, *, dtype, init_seed):
        self.name = name
        hidden = max(1, channels // reduction)
        self.squeeze = Linear(name + ".squeeze", channels, hidden, dtype=dtype,
                              init_seed=init_seed)
        self.excite = Linear(name + ".excite", hidden, channels, dtype=dtype,
                             init_seed=init_seed)

    def forward(self, x):
        gate = T.sigmoid(self.excite.forward(T.relu(self.squeeze.forward(x))))
        return T.mul(gate, x)

    def parameters(self):
        yield from self.squeeze.parameters()
        yield from self.excite.parameters()

    def geometry(self):
        yield self.squeeze.geometry
        yield self.excite.geometry


class ClassifierHead:
    def __init__(self, name, n_in, hidden, num_classes, dropout_p, *, dtype, init_seed):
        self.name = name
        self.dropout_p = dropout_p
        self.fc1 = Linear(name + ".fc1", n_in, hidden, dtype=dtype, init_seed=init_seed)
        self.bn = BatchNorm2d(name + ".bn", hidden, dtype=dtype, init_seed=init_seed)
        self.fc2 = Linear(name + ".fc2", hidden, num_classes, dtype=dtype,
                          init_seed=init_seed)

    def forward(self, x, training, rng=None):
        h = self.fc1.forward(x)
        b, n = h.shape
        h = T.reshape(self.bn.forward(T.reshape(h, (b, n, 1, 1)), training), (b, n))
        h = T.dropout(T.swish(h), self.dropout_p, training, rng)
        return T.softmax(self.fc2.forward(h), axis=1)

    def parameters(self):
        for layer in (self.fc1, self.bn, self.fc2):
            yield from layer.parameters()

    def buffers(self):
        yield from self.bn.buffers()

    def geometry(self):
        yield self.fc1.geometry
        yield self.fc2.geometry


class SkaNet:
    """End-to-end classifier: TFI stream, PSD stream, SE gate, softmax head."""

    def __init__(self, config: ModelConfig, variant: str = "full",
                 dtype=np.float32, init_seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.config = config
        self.variant = variant
        self.dtype = np.dtype(dtype)
        self.init_seed = init_seed
        stft_block = PlainAcbBlock if variant == "no_sk_acb" else SkAcbBlock
        self.stft_stream = Stream("stft", config.stft_stem, config.stft_stages,
                                  stft_block, dtype=dtype, init_seed=init_seed)
        self.psd_stream = None
        if variant != "no_psd_stream":
            self.psd_stream = Stream("psd", config.psd_stem, config.psd_stages,
                                     PlainAcbBlock, dtype=dtype, init_seed=init_seed)
        feature_dim = self.stft_stream.out_channels
        if self.psd_stream is not None:
            feature_dim += self.psd_stream.out_channels
        self.feature_dim = feature_dim
        self.se = None
        if variant not in ("no_se_fusion", "no_psd_stream"):
            self.se = SeFusion("se", feature_dim, config.se_reduction,
                               dtype=dtype, init_seed=init_seed)
        self.head = ClassifierHead("head", feature_dim, config.head_hidden,
                                   config.num_classes, config.dropout_p,
                                   dtype=dtype, init_seed=init_seed)

    def _check_input(self, x, what):
        side = self.config.input_side
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
            raise ValueError(
                f"{what} must be [B, 1, {side}, {side}], got {tuple(x.shape)}"
            )

    def forward(self, x_tfi, x_psd=None, training=False, rng=None):
        """Class probabilities [B, num_classes]; rows live on the simplex."""
        self._check_input(x_tfi, "TFI input")
        features = self.stft_stream.forward(x_tfi, training)
        if self.psd_stream is not None:
            if x_psd is None:
                raise ValueError("this model requires a PSD input")
            self._check_input(x_psd, "PSD input")
            if x_psd.shape[0] != x_tfi.shape[0]:
                raise ValueError("TFI and PSD batches must match")
            features = T.concat([features, self.psd_stream.forward(x_psd, training)],
                                axis=1)
        if self.se is not None:
            features = self.se.forward(features)
        return self.head.forward(features, training, rng)

    def fuse(self):
        """Fold every ACB into its single-conv inference form, in place."""
        self.stft_stream.fuse()
        if self.psd_stream is not None:
            self.psd_stream.fuse()
        return self

    @property
    def is_fused(self):
        first_block = self.stft_stream.stages[0][0]
        acb = first_block.branches[0] if hasattr(first_block, "branches") else first_block.acb
        return acb.is_fused

    def named_parameters(self):
        params = {}
        for p in self._parameters():
            if p.name in params:
                raise ValueError(f"duplicate parameter name {p.name}")
            params[p.name] = p
        return params

    def _parameters(self):
        yield from self.stft_stream.parameters()
        if self.psd_stream is not None:
            yield from self.psd_stream.parameters()
        if self.se is not None:
            yield from self.se.parameters()
        yield from self.head.parameters()

    def named_buffers(self):
        buffers = {}
        sources = [self.stft_stream.buffers(), self.head.buffers()]
        if self.psd_stream is not None:
            sources.insert(1, self.psd_stream.buffers())
        for source in sources:
            for name, arr in source:
                buffers[name] = arr
        return buffers

    def bn_layers(self):
        found = []

        def scan(obj):
            if isinstance(obj, BatchNorm2d):
                found.append(obj)
                return
            for attr in ("stem", "conv3x3", "conv1x3", "conv3x1", "bn3x3", "bn1x3",
                         "bn3x1", "acb", "bn", "reduce"):
                if hasattr(obj, attr):
                    scan(getattr(obj, attr))
            if hasattr(obj, "branches"):
                for b in obj.branches:
                    scan(b)
            if hasattr(obj, "stages"):
                for block, down in obj.stages:
                    scan(block)
                    scan(down)

        scan(self.stft_stream)
        if self.psd_stream is not None:
            scan(self.psd_stream)
        scan(self.head)
        return found

    def layer_geometry(self, input_side=None, fused_acb=True):
        """Conv/linear layer descriptors with realized feature-map sizes."""
        side = input_side or self.config.input_side
        rows = list(self.stft_stream.geometry(side, fused_acb))
        if self.psd_stream is not None:
            rows.extend(self.psd_stream.geometry(side, fused_acb))
        if self.se is not None:
            rows.extend(self.se.geometry())
        rows.extend(self.head.geometry())
        return rows


def build_model(config: ModelConfig, variant: str = "full", dtype=np.float32,
                init_seed: int = 0) -> SkaNet:
    return SkaNet(config, variant=variant, dtype=dtype, init_seed=init_seed)


def count_params(model: SkaNet) -> int:
    """Total trainable scalar count (convs, batch norms, linears, attention)."""
    return sum(p.data.size for p in model.named_parameters().values())
