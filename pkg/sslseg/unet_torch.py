"""
The 2D UNet-like backbone and its interchangeable heads.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional

import torch
from torch import nn

from . import core

HEAD_MODES = ("regression", "global", "local", "segmentation")


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    num_classes: int = 2
    global_embed_dim: int = 128
    local_embed_dim: int = 64
    global_hidden_dim: int = 256

    def validate(self):
        """Raise ValueError naming the first invalid field."""
        checks = [
            ("depth", self.depth >= 1),
            ("base_channels", self.base_channels >= 1),
            ("in_channels", self.in_channels >= 1),
            ("num_classes", self.num_classes >= 2),
            ("global_embed_dim", self.global_embed_dim >= 2),
            ("local_embed_dim", self.local_embed_dim >= 2),
            ("global_hidden_dim", self.global_hidden_dim >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid UNetConfig.{name}={getattr(self, name)!r}")
        return self

    def channels(self, level):
        return self.base_channels * 2**level

    def to_dict(self):
        return asdict(self)


class ForwardOutputs(NamedTuple):
    encoder_features: List[torch.Tensor]
    bottleneck: torch.Tensor
    decoder_features: List[torch.Tensor]
    head_output: Optional[torch.Tensor]


def _he_uniform(shape, fan_in, generator):
    bound = math.sqrt(6.0 / fan_in)
    w = torch.empty(shape)
    w.uniform_(-bound, bound, generator=generator)
    return nn.Parameter(w)


class Conv(nn.Module):
    """ k x k same-padded convolution with He-uniform init """

    def __init__(self, nin, nout, sz, generator):
        super().__init__()
        self.weight = _he_uniform((nout, nin, sz, sz), nin * sz * sz, generator)
        self.bias = nn.Parameter(torch.zeros(nout))

    def forward(self, x):
        return core.conv2d(x, self.weight, self.bias)


class Linear(nn.Module):

    def __init__(self, nin, nout, generator):
        super().__init__()
        self.weight = _he_uniform((nout, nin), nin, generator)
        self.bias = nn.Parameter(torch.zeros(nout))

    def forward(self, x):
        return core.linear(x, self.weight, self.bias)


class ConvNormReLU(nn.Module):

    def __init__(self, nin, nout, generator):
        super().__init__()
        self.conv = Conv(nin, nout, 3, generator)
        self.gain = nn.Parameter(torch.ones(nout))
        self.shift = nn.Parameter(torch.zeros(nout))

    def forward(self, x):
        return core.relu(core.instance_norm(self.conv(x), self.gain, self.shift))


class DoubleConv(nn.Sequential):

    def __init__(self, nin, nout, generator):
        super().__init__(ConvNormReLU(nin, nout, generator),
                         ConvNormReLU(nout, nout, generator))


class GlobalHead(nn.Module):
    """ spatial average -> linear -> relu -> linear -> unit norm """

    def __init__(self, nin, nhidden, nout, generator):
        super().__init__()
        self.fc1 = Linear(nin, nhidden, generator)
        self.fc2 = Linear(nhidden, nout, generator)

    def forward(self, bottleneck):
        x = bottleneck.mean(dim=(-2, -1))
        x = self.fc2(core.relu(self.fc1(x)))
        return core.l2_normalize(x, dim=1)


class LocalHead(nn.Module):
    """ 1x1 conv on the full-resolution decoder level, unit norm over channels """

    def __init__(self, nin, nout, generator):
        super().__init__()
        self.conv = Conv(nin, nout, 1, generator)

    def forward(self, x):
        return core.l2_normalize(self.conv(x), dim=1)


class UNet(nn.Module):
    """Encoder-decoder with skip connections and one swappable head.

    Encoder level i works at (H/2^i, W/2^i) with base_channels*2^i channels; the
    bottleneck sits at (H/2^depth, W/2^depth). Decoder level i upsamples level
    i+1, concatenates the level-i encoder output and applies two conv-norm-relu
    blocks. Heads read the bottleneck (global) or decoder level 0 (all others).
    """

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config.validate()
        generator = torch.Generator().manual_seed(int(seed))
        depth = config.depth
        self.encoder = nn.ModuleList()
        nin = config.in_channels
        for level in range(depth):
            self.encoder.append(DoubleConv(nin, config.channels(level), generator))
            nin = config.channels(level)
        self.bottleneck = DoubleConv(nin, config.channels(depth), generator)
        self.decoder = nn.ModuleList()
        for level in range(depth):
            nskip = config.channels(level)
            nup = config.channels(level + 1)
            self.decoder.append(DoubleConv(nup + nskip, nskip, generator))
        self.head = None
        self.head_mode = None

    @property
    def device(self):
        return next(self.parameters()).device

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encoder_parameters(self):
        for module in (self.encoder, self.bottleneck):
            yield from module.parameters()

    def decoder_parameters(self):
        yield from self.decoder.parameters()

    def backbone_state(self):
        """ copy of all non-head parameters, keyed by name """
        return OrderedDict((k, v.detach().clone()) for k, v in self.state_dict().items()
                           if not k.startswith("head."))

    def attach_head(self, mode, seed=0):
        """Replace the current head by a freshly initialized one for mode."""
        if mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {mode!r}, expected one of {HEAD_MODES}")
        cfg = self.config
        generator = torch.Generator().manual_seed(int(seed))
        c0 = cfg.channels(0)
        if mode == "regression":
            head = Conv(c0, cfg.in_channels, 1, generator)
        elif mode == "segmentation":
            head = Conv(c0, cfg.num_classes, 1, generator)
        elif mode == "local":
            head = LocalHead(c0, cfg.local_embed_dim, generator)
        else:
            head = GlobalHead(cfg.channels(cfg.depth), cfg.global_hidden_dim,
                              cfg.global_embed_dim, generator)
        self.head = head.to(device=self.device, dtype=self.dtype)
        self.head_mode = mode
        return self

    def detach_head(self):
        self.head = None
        self.head_mode = None
        return self

    def check_input(self, x):
        core._check_ndim("UNet input", x, 4)
        div = 2**self.config.depth
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"UNet expects {self.config.in_channels} input channels, "
                             f"got {x.shape[1]}")
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ValueError(f"input H, W {tuple(x.shape[-2:])} must be divisible by "
                             f"2^depth = {div}")

    def encode(self, x):
        features = []
        for block in self.encoder:
            x = block(x)
            features.append(x)
            x = core.max_pool2(x)
        return features, self.bottleneck(x)

    def decode(self, features, bottleneck):
        decoded = [None] * len(features)
        x = bottleneck
        for level in reversed(range(len(features))):
            x = core.upsample_nearest2(x)
            x = self.decoder[level](torch.cat((x, features[level]), dim=1))
            decoded[level] = x
        return decoded

    def forward(self, x, decode=True):
        self.check_input(x)
        features, bottleneck = self.encode(x)
        decoded = self.decode(features, bottleneck) if decode else []
        head_output = None
        if self.head is not None:
            if self.head_mode == "global":
                head_output = self.head(bottleneck)
            else:
                if not decoded:
                    raise ValueError(f"{self.head_mode} head needs the decoder pathway")
                head_output = self.head(decoded[0])
        return ForwardOutputs(features, bottleneck, decoded, head_output)

    def save_model(self, filename, metadata=None):
        """
        Save the model to a checkpoint file.

        Args:
            filename (str): The path to the file where the model will be saved.
            metadata (dict, optional): extra JSON-serializable header fields.
        """
        from .io import save_checkpoint
        save_checkpoint(filename, self, metadata=metadata)

    def load_model(self, filename, device=None):
        """Load weights (and head) from a checkpoint written by save_model."""
        from .io import load_checkpoint, load_state_into
        ckpt = load_checkpoint(filename)
        load_state_into(self, ckpt)
        if device is not None:
            self.to(device)
        return self
