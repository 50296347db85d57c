"""U-Net generator and patch discriminator for conditional image translation.

Both networks follow the pix2pix family at configurable depth and width.
Normalisation uses per-sample statistics (instance norm) so a batch of one
is well defined. Parameters are plain ``torch`` modules; a module's
``state_dict`` is the named parameter set and :func:`shape_manifest`
describes it.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import as_raster, image_dims
from .errors import ConfigInvalid, IoFailure, ShapeMismatch

NORM_EPS = 1e-5
INIT_STD = 0.02
PARAMS_FORMAT = "derain-params/1"


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 8
    depth: int = 3
    input_dims: tuple[int, int] = (64, 64)
    dropout: bool = True
    dropout_rate: float = 0.5

    def validate(self) -> None:
        if self.base_channels < 4:
            raise ConfigInvalid(f"base_channels must be >= 4, got {self.base_channels}")
        if not 2 <= self.depth <= 8:
            raise ConfigInvalid(f"depth must be in [2, 8], got {self.depth}")
        step = 2 ** self.depth
        w, h = self.input_dims
        if w <= 0 or h <= 0 or w % step or h % step:
            raise ConfigInvalid(f"input dims {w}x{h} are not multiples of 2^{self.depth} = {step}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigInvalid("dropout_rate must be in [0, 1)")

    def channels(self, stage: int) -> int:
        return self.base_channels * min(2 ** stage, 8)

    def dropout_stages(self) -> list[int]:
        """Decoder stages with dropout: the ones just outside the innermost, as in pix2pix (none below depth 6)."""
        if not self.dropout:
            return []
        return [k for k in range(self.depth - 2, 3, -1)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 8
    n_layers: int = 2
    input_dims: tuple[int, int] = (64, 64)

    def validate(self) -> None:
        if self.base_channels < 4:
            raise ConfigInvalid(f"base_channels must be >= 4, got {self.base_channels}")
        if not 1 <= self.n_layers <= 4:
            raise ConfigInvalid(f"n_layers must be in [1, 4], got {self.n_layers}")
        gw, gh = patch_grid_dims(self.input_dims, self.n_layers)
        if gw < 1 or gh < 1:
            raise ConfigInvalid(f"{self.input_dims} is too small for {self.n_layers} discriminator layers")


def _conv_out(n: int, stride: int) -> int:
    # kernel 4, padding 1
    return (n + 2 - 4) // stride + 1


def patch_grid_dims(input_dims: tuple[int, int], n_layers: int) -> tuple[int, int]:
    """(width, height) of the discriminator logit grid."""
    out = []
    for n in input_dims:
        for _ in range(n_layers):
            n = _conv_out(n, 2)
        n = _conv_out(_conv_out(n, 1), 1)
        out.append(n)
    return out[0], out[1]


def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True, eps=NORM_EPS, track_running_stats=False)


class _Down(nn.Module):
    def __init__(self, cin: int, cout: int, norm: bool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, 2, 1)
        self.norm = _norm(cout) if norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return nn.functional.leaky_relu(x, 0.2)


class _Up(nn.Module):
    def __init__(self, cin: int, cout: int, dropout: float = 0.0):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1)
        self.norm = _norm(cout)
        self.dropout = dropout

    def forward(self, x, rng: torch.Generator | None = None):
        x = self.norm(self.conv(x))
        if self.training and self.dropout > 0:
            keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= self.dropout
            x = x * keep / (1.0 - self.dropout)
        return torch.relu(x)


class Generator(nn.Module):
    """Encoder-decoder with skip concatenation; outputs images in [0, 1]."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.depth
        ch = config.channels
        self.down = nn.ModuleList(
            [_Down(3 if i == 0 else ch(i - 1), ch(i), norm=0 < i < d - 1) for i in range(d)]
        )
        drop = set(config.dropout_stages())
        # up[k] restores the resolution of encoder stage k - 1; up[0] is the output layer
        ups = [None] * d
        for k in range(d - 1, 0, -1):
            cin = ch(d - 1) if k == d - 1 else 2 * ch(k)
            ups[k] = _Up(cin, ch(k - 1), config.dropout_rate if k in drop else 0.0)
        self.up = nn.ModuleList(ups[1:])
        self.out = nn.ConvTranspose2d(2 * ch(0), 3, 4, 2, 1)
        # dropout noise source; callers that need reproducibility replace it
        self.rng = torch.Generator().manual_seed(0)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        d = self.config.depth
        x = self.up[d - 2](skips[-1], self.rng)
        for k in range(d - 2, 0, -1):
            x = self.up[k - 1](torch.cat([x, skips[k]], dim=1), self.rng)
        x = self.out(torch.cat([x, skips[0]], dim=1))
        return (torch.tanh(x) + 1.0) * 0.5


class Discriminator(nn.Module):
    """Patch discriminator over the channel concatenation (condition, candidate)."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        config.validate()
        self.config = config
        b, n = config.base_channels, config.n_layers
        layers: list[nn.Module] = [nn.Conv2d(6, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        prev = b
        for i in range(1, n):
            cur = b * min(2 ** i, 8)
            layers += [nn.Conv2d(prev, cur, 4, 2, 1), _norm(cur), nn.LeakyReLU(0.2)]
            prev = cur
        cur = b * min(2 ** n, 8)
        layers += [nn.Conv2d(prev, cur, 4, 1, 1), _norm(cur), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(cur, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, condition, candidate):
        return self.model(torch.cat([condition, candidate], dim=1))


def init_weights(module: nn.Module, seed: int) -> None:
    """Convolution weights ~ N(0, 0.02), biases 0, norm scales 1; drawn in parameter order."""
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                w = rng.normal(0.0, INIT_STD, size=tuple(m.weight.shape))
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_generator(config: GeneratorConfig, seed: int) -> Generator:
    net = Generator(config)
    init_weights(net, seed)
    return net


def build_discriminator(config: DiscriminatorConfig, seed: int) -> Discriminator:
    net = Discriminator(config)
    init_weights(net, seed)
    return net


def shape_manifest(module: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(t.shape)) for name, t in module.state_dict().items()]


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- image <-> tensor --------------------------------------------------------

def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) raster to a (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().to(torch.float32).numpy()[0].transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def check_dims(img: np.ndarray, dims: tuple[int, int], what: str = "image") -> None:
    got = image_dims(img)
    if tuple(got) != tuple(dims):
        raise ShapeMismatch(f"{what} is {got[0]}x{got[1]}, network expects {dims[0]}x{dims[1]}")


def generator_forward(params: Generator, image: np.ndarray) -> np.ndarray:
    """Inference-mode prediction for one raster."""
    image = as_raster(image)
    check_dims(image, params.config.input_dims)
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            dtype = next(params.parameters()).dtype
            return to_image(params(to_tensor(image, dtype)))
    finally:
        params.train(was_training)


def predictor(params: Generator):
    """Wrap a generator as an image-to-image callable."""
    return lambda image: generator_forward(params, image)


def discriminator_forward(params: Discriminator, condition: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Patch logits as an (h', w') array."""
    condition, candidate = as_raster(condition), as_raster(candidate)
    check_dims(condition, params.config.input_dims, "condition")
    check_dims(candidate, params.config.input_dims, "candidate")
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            dtype = next(params.parameters()).dtype
            out = params(to_tensor(condition, dtype), to_tensor(candidate, dtype))
    finally:
        params.train(was_training)
    return out[0, 0].cpu().numpy().astype(np.float64)


# --- archives ----------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_archive(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Deterministic zip of ``.npy`` members plus ``manifest.json``.

    Member timestamps are fixed so identical content gives identical bytes;
    the result is also readable with ``numpy.load``.
    """
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
            zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1).encode())
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write archive {path}: {exc}") from exc


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot read archive {path}: {exc}") from exc
    return arrays, manifest


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    expected = dict(shape_manifest(module))
    got = {k: tuple(v.shape) for k, v in state.items()}
    if got != expected:
        raise ShapeMismatch("archived parameters do not match the network configuration")
    module.load_state_dict(state)


def save_params(path: str | Path, module: Generator | Discriminator) -> None:
    kind = "generator" if isinstance(module, Generator) else "discriminator"
    manifest = {
        "format": PARAMS_FORMAT,
        "kind": kind,
        "config": asdict(module.config),
        "shapes": {k: list(s) for k, s in shape_manifest(module)},
    }
    write_archive(path, state_arrays(module), manifest)


def load_params(path: str | Path) -> Generator | Discriminator:
    arrays, manifest = read_archive(path)
    if manifest.get("format") != PARAMS_FORMAT:
        raise IoFailure(f"{path}: unsupported parameter archive format {manifest.get('format')!r}")
    cfg = dict(manifest["config"])
    cfg["input_dims"] = tuple(cfg["input_dims"])
    if manifest["kind"] == "generator":
        net: nn.Module = Generator(GeneratorConfig(**cfg))
    else:
        net = Discriminator(DiscriminatorConfig(**cfg))
    load_state_arrays(net, arrays)
    return net
