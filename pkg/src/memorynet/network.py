"""Three-stage restoration network with memory-augmented stage inputs.

Stages 1 and 2 are small U-shaped encoder/decoders; stage 3 is a stack of
flat residual blocks at full resolution.  Each stage reads its own shallow
features of the degraded image, adds a memory read of those features (part,
instance and semantic level for stages 1, 2, 3), and, from stage 2 on, the
fused product of the previous stage.  A supervised attention module (SAM)
between stages emits an intermediate estimate and gates the features that
are carried forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import arraydiff as ad
from .arraydiff import Tensor
from .errors import ConfigurationError, DimensionError
from .memory import MemoryConfig, PrototypeBank, feature_queries, hierarchical_read, init_bank, queries_to_map

STAGES = (1, 2, 3)
# cosine guard for memory queries: ReLU features can be exactly zero at a pixel
QUERY_EPS = 1e-12
HEAD_GAIN = 0.1


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    depth: int = 2
    residual_blocks: int = 4
    use_memory: bool = True
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    stage_count = 3

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.residual_blocks < 1:
            raise ConfigurationError("residual_blocks must be >= 1")
        if self.memory.C != self.base_channels:
            raise ConfigurationError(
                f"memory.C ({self.memory.C}) must equal base_channels ({self.base_channels})"
            )

    @classmethod
    def tiny(cls, channels: int = 8, **memory) -> "NetConfig":
        return cls(base_channels=channels, memory=MemoryConfig(C=channels, **memory))


@dataclass
class StageFeatures:
    encoder: list[Tensor]
    decoder: list[Tensor]
    sfe: Tensor | None


def parameter_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable array; a pure function of the config."""
    c = config.base_channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k=3):
        shapes[f"{name}.w"] = (c_out, c_in, k, k)
        shapes[f"{name}.b"] = (c_out, 1, 1)

    for s in STAGES:
        conv(f"s{s}.shallow", c, 3)
    for s in (1, 2):
        for level in range(config.depth + 1):
            conv(f"s{s}.enc{level}", c, c)
        for level in reversed(range(config.depth)):
            conv(f"s{s}.dec{level}", c, 2 * c)
        conv(f"s{s}.sfe", c, c, k=1)
        conv(f"s{s}.sam.head", 3, c)
        conv(f"s{s}.sam.gate", c, 3)
        conv(f"s{s}.fuse", c, c, k=1)
    for r in range(config.residual_blocks):
        conv(f"s3.res{r}.a", c, c)
        conv(f"s3.res{r}.b", c, c)
    conv("s3.head", 3, c)
    conv("recon.head", 3, c)
    m = config.memory
    shapes["memory.part_metric"] = (m.B, m.n_part, m.C)
    return shapes


HEAD_PARAMS = ("s1.sam.head", "s2.sam.head", "s3.head", "recon.head")


def init_parameters(config: NetConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name == "memory.part_metric":
            continue
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        if name[:-2] in HEAD_PARAMS:
            std = HEAD_GAIN / np.sqrt(fan_in)
        params[name] = rng.normal(0.0, std, size=shape)
    bank = init_bank(config.memory, seed=int(rng.integers(2**31)))
    out = {name: Tensor(value, requires_grad=True) for name, value in params.items()}
    out["memory.part_metric"] = bank.part_metric
    return {name: out[name] for name in parameter_shapes(config)}


def _as_image(img) -> Tensor:
    return img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=np.float64))


class StageNetwork:
    """Parameters and wiring of the three-stage network.

    ``params`` maps names to leaf tensors; swapping an entry (see
    :meth:`with_parameter`) is how gradient checks perturb a single group.
    """

    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigurationError(f"parameter names mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "StageNetwork":
        return cls(config, init_parameters(config, seed))

    @property
    def bank(self) -> PrototypeBank:
        return PrototypeBank(self.config.memory, self.params["memory.part_metric"])

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_parameter(self, name: str, value: Tensor) -> "StageNetwork":
        params = dict(self.params)
        params[name] = value
        return StageNetwork(self.config, params)

    def with_config(self, **changes) -> "StageNetwork":
        return StageNetwork(replace(self.config, **changes), self.params)

    # -- layers -----------------------------------------------------------

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.conv2d(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def check_extents(self, img) -> None:
        img = _as_image(img)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"expected a (3, H, W) image, got {img.shape}")
        factor = 2 ** self.config.depth
        if img.shape[1] % factor or img.shape[2] % factor:
            raise ConfigurationError(
                f"image extents {img.shape[1]}x{img.shape[2]} must be divisible by {factor} (2**depth)"
            )

    def shallow_features(self, img, stage: int) -> Tensor:
        img = _as_image(img)
        self.check_extents(img)
        return ad.relu(self._conv(img, f"s{stage}.shallow"))

    def memory_term(self, f: Tensor, stage: int) -> Tensor | None:
        """Memory read of the stage's query map at that stage's level, or None if disabled."""
        if not self.config.use_memory:
            return None
        _, h, w = f.shape
        reads = hierarchical_read(feature_queries(f), self.bank, eps=QUERY_EPS)
        return queries_to_map(reads[stage - 1], h, w)

    def stage_input(self, f: Tensor, stage: int, sfe: Tensor | None = None) -> Tensor:
        e = f
        y = self.memory_term(f, stage)
        if y is not None:
            e = ad.add(e, y)
        if sfe is not None:
            if sfe.shape != f.shape:
                raise DimensionError(f"fusion input {sfe.shape} does not match features {f.shape}")
            e = ad.add(e, sfe)
        return e

    def stage_inputs(self, f1, f2, f3, sfe1=None, sfe2=None) -> tuple[Tensor, Tensor, Tensor]:
        for f in (f2, f3):
            if f.shape != f1.shape:
                raise DimensionError(f"stage features {f.shape} and {f1.shape} differ")
        return self.stage_input(f1, 1), self.stage_input(f2, 2, sfe1), self.stage_input(f3, 3, sfe2)

    def encode_decode(self, e: Tensor, stage: int) -> tuple[StageFeatures, Tensor]:
        if stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {stage}")
        if stage == 3:
            r = e
            blocks = []
            for i in range(self.config.residual_blocks):
                t = self._conv(ad.relu(self._conv(r, f"s3.res{i}.a")), f"s3.res{i}.b")
                r = ad.add(r, t)
                blocks.append(r)
            return StageFeatures(encoder=[e], decoder=blocks, sfe=None), r

        enc = self._encode(e, stage)
        dec = self._decode(enc, stage)
        sfe = self._conv(dec[-1], f"s{stage}.sfe")
        return StageFeatures(encoder=enc, decoder=dec, sfe=sfe), dec[-1]

    def _encode(self, e: Tensor, stage: int) -> list[Tensor]:
        p = f"s{stage}"
        enc = [ad.relu(self._conv(e, f"{p}.enc0"))]
        for level in range(1, self.config.depth + 1):
            enc.append(ad.relu(self._conv(ad.avg_pool2(enc[-1]), f"{p}.enc{level}")))
        return enc

    def _decode(self, enc: list[Tensor], stage: int) -> list[Tensor]:
        p = f"s{stage}"
        d = enc[-1]
        dec = []
        for level in reversed(range(self.config.depth)):
            d = ad.relu(self._conv(ad.concat_channels(ad.upsample2(d), enc[level]), f"{p}.dec{level}"))
            dec.append(d)
        return dec

    def sam(self, features: Tensor, img, stage: int) -> tuple[Tensor, Tensor]:
        """Supervised attention: intermediate estimate and gated features."""
        img = _as_image(img)
        if features.shape[1:] != img.shape[1:]:
            raise DimensionError(f"SAM features {features.shape} do not match image {img.shape}")
        estimate = ad.add(img, self._conv(features, f"s{stage}.sam.head"))
        mask = ad.sigmoid(self._conv(estimate, f"s{stage}.sam.gate"))
        gated = ad.add(ad.mul(features, mask), features)
        return gated, estimate

    # -- full passes --------------------------------------------------------

    def forward(self, img) -> tuple[Tensor, Tensor, Tensor]:
        img = _as_image(img)
        self.check_extents(img)
        estimates = []
        carry = None
        for stage in STAGES:
            f = self.shallow_features(img, stage)
            e = self.stage_input(f, stage, carry)
            feats, out = self.encode_decode(e, stage)
            if stage < 3:
                gated, estimate = self.sam(out, img, stage)
                carry = ad.add(feats.sfe, self._conv(gated, f"s{stage}.fuse"))
            else:
                estimate = ad.add(img, self._conv(out, "s3.head"))
            estimates.append(estimate)
        return tuple(estimates)

    __call__ = forward

    def reconstruct(self, clean) -> Tensor:
        """Stage-1 reconstruction of a clean image with the memory read at the bottleneck.

        The stage-1 encoder runs on the clean image's shallow features, its
        deepest map gets a residual part-level memory read, and the stage-1
        decoder plus a separate head map the result back to RGB.
        """
        enc = self._encode(self.shallow_features(clean, 1), 1)
        y = self.memory_term(enc[-1], 1)
        if y is not None:
            enc[-1] = ad.add(enc[-1], y)
        return self._conv(self._decode(enc, 1)[-1], "recon.head")

    def trainable(self) -> dict[str, Tensor]:
        return self.params


def restore(net: StageNetwork, img) -> np.ndarray:
    """Final estimate X_3 as a plain array clipped to [0, 1]."""
    return np.clip(net.forward(img)[2].data, 0.0, 1.0)
