"""Motion-aware deblurring network.

Two encoders build image+event and event-only feature pyramids; a deblur
stage applies modulated deformable convolutions whose offsets and masks
come from the event features; per-scale decoders reconstruct residuals
coarse to fine on top of the downsampled blurry image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensorkit as tk
from .errors import ConfigError, ShapeError
from .events import EventStream, chunk as chunk_stream, voxelize
from .tensorkit import Tensor

N_RESIDUAL_BLOCKS = 10
VOXEL_NORM_PERCENTILE = 98.0
PERCEP_CHANNELS = 8
PERCEP_LAYERS = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation toggles."""

    n_scales: int = 3
    base_channels: int = 16
    n_chunks: int = 5
    kernel: int = 3
    use_events: bool = True
    use_deblur_module: bool = True
    use_lstm: bool = True
    use_c2f: bool = True
    image_channels: int = 1
    voxel_bins: int = 5
    lambda_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_scales < 1:
            raise ConfigError("need at least one scale")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.use_deblur_module and not self.use_events:
            raise ConfigError("the deblur module requires event input")
        if self.use_lstm and not self.use_deblur_module:
            raise ConfigError("the recurrent encoder requires the deblur module")
        if self.n_chunks < 1:
            raise ConfigError("need at least one chunk")

    @property
    def event_channels(self) -> int:
        return max(self.base_channels // 2, 4)


def ablation_rows(base: ModelConfig) -> dict[str, ModelConfig]:
    """The standard toggle grid, image-only up to the full model."""
    return {
        "im": replace(base, use_events=False, use_deblur_module=False,
                      use_lstm=False, use_c2f=False),
        "im+c2f": replace(base, use_events=False, use_deblur_module=False,
                          use_lstm=False, use_c2f=True),
        "im+c2f+ev": replace(base, use_events=True, use_deblur_module=False,
                             use_lstm=False, use_c2f=True),
        "im+c2f+ev+dm": replace(base, use_events=True, use_deblur_module=True,
                                use_lstm=False, use_c2f=True),
        "full": replace(base, use_events=True, use_deblur_module=True,
                        use_lstm=True, use_c2f=True),
    }


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, derivable from the config alone."""
    c = cfg.base_channels
    e = cfg.event_channels
    k = cfg.kernel
    kk = k * k
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    cin = cfg.image_channels + cfg.voxel_bins
    for l in range(cfg.n_scales):
        conv(f"enc1.s{l}.a", cin if l == 0 else c, c)
        conv(f"enc1.s{l}.b", c, c)

    conv("enc2.embed.a", cfg.voxel_bins, e)
    conv("enc2.embed.b", e, e)
    conv("enc2.lstm", 2 * e, 4 * e)
    for l in range(cfg.n_scales):
        conv(f"enc2.proj.s{l}", e, c)

    for l in range(cfg.n_scales):
        conv(f"dm.s{l}.head", c, c)
        conv(f"dm.s{l}.off", c, 2 * kk)
        conv(f"dm.s{l}.mask", c, kk)
        conv(f"dm.s{l}.conv", c, c)
        if l < cfg.n_scales - 1:
            conv(f"dm.s{l}.fuse", 2 * c, c)

    for l in range(cfg.n_scales):
        if l < cfg.n_scales - 1:
            conv(f"dec.s{l}.gate", 2 * c, c)
        for j in range(N_RESIDUAL_BLOCKS):
            conv(f"dec.s{l}.blk{j}.a", c, c)
            conv(f"dec.s{l}.blk{j}.b", c, c)
        conv(f"dec.s{l}.out", c, cfg.image_channels)
    return shapes


def init_weights(cfg: ModelConfig) -> dict[str, Tensor]:
    """He-init conv weights; offset and mask heads start at the standard-conv
    degenerate point (zero offsets, logistic(0) = 0.5 masks); residual blocks
    open as identities (second conv zeroed) so estimates start near the blur;
    biases zero."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(17,)))
    weights: dict[str, Tensor] = {}
    for name, shape in weight_shapes(cfg).items():
        if (
            name.endswith(".b")
            or ".off." in name
            or ".mask." in name
            or (".blk" in name and name.endswith(".b.w"))
        ):
            data = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name.endswith("out.w"):
                data *= 0.1  # keep initial residuals small
        else:
            data = np.zeros(shape)
        weights[name] = Tensor(data, requires_grad=True, name=name)
    return weights


def trainable_names(cfg: ModelConfig) -> list[str]:
    """Parameters actually used by the configured forward pass."""
    names = []
    for name in weight_shapes(cfg):
        if not cfg.use_deblur_module:
            if name.startswith("enc2.") or ".head." in name or ".off." in name \
                    or ".mask." in name:
                continue
        if not cfg.use_lstm and name.startswith("enc2.lstm"):
            continue
        if not cfg.use_c2f and name.startswith("dec."):
            # only the finest-scale decoder runs, and it has no gate
            if not name.startswith("dec.s0.") or ".gate." in name:
                continue
        names.append(name)
    return names


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------

def voxel_normalizer(voxel: np.ndarray) -> float:
    """Per-sample scale: 98th percentile of nonzero |cells|; 1 if empty."""
    nz = np.abs(voxel[voxel != 0])
    if nz.size == 0:
        return 1.0
    q = float(np.percentile(nz, VOXEL_NORM_PERCENTILE))
    return q if q > 0 else 1.0


def prepare_inputs(
    blur: np.ndarray, stream: EventStream, cfg: ModelConfig
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Image + normalized voxel/chunk grids as CHW arrays for one scene."""
    if blur.ndim == 2:
        img = blur[None]
    elif blur.ndim == 3:
        img = np.moveaxis(blur, 2, 0)
    else:
        raise ShapeError(f"expected (H,W) or (H,W,C) blur, got {blur.shape}")
    if img.shape[0] != cfg.image_channels:
        raise ShapeError(f"blur has {img.shape[0]} channels, config wants {cfg.image_channels}")
    voxel = voxelize(stream, cfg.voxel_bins).bins
    scale = voxel_normalizer(voxel)
    voxel = voxel / scale
    chunks = [g.bins / scale for g in chunk_stream(stream, cfg.n_chunks, cfg.voxel_bins).chunks]
    return img.astype(np.float64), voxel, chunks


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

@dataclass
class ScalePrediction:
    """Residual and sharp estimate at one pyramid scale."""

    scale: int
    residual: Tensor
    estimate: Tensor


def _conv_block(x: Tensor, w: dict[str, Tensor], name: str, padding: int) -> Tensor:
    return tk.relu(tk.conv2d(x, w[f"{name}.w"], w[f"{name}.b"], padding=padding))


def encode_image_events(
    blur: Tensor, voxel: Tensor, w: dict[str, Tensor], cfg: ModelConfig
) -> list[Tensor]:
    """Image+event pyramid: per scale (conv, relu) x2 then downsample by 2."""
    if blur.data.shape[2:] != voxel.data.shape[2:]:
        raise ShapeError("blur and voxel grids disagree spatially")
    if not cfg.use_events:
        voxel = Tensor(np.zeros_like(voxel.data))
    pad = cfg.kernel // 2
    x = tk.concat_channels([blur, voxel])
    pyramid = []
    for l in range(cfg.n_scales):
        x = _conv_block(x, w, f"enc1.s{l}.a", pad)
        x = _conv_block(x, w, f"enc1.s{l}.b", pad)
        pyramid.append(x)
        if l < cfg.n_scales - 1:
            x = tk.avgpool2(x)
    return pyramid


def encode_events_recurrent(
    chunks: list[Tensor], w: dict[str, Tensor], cfg: ModelConfig
) -> list[Tensor]:
    """Event-only pyramid from time-ordered chunks.

    Chunks share an embedding; a ConvLSTM integrates them in order (or a
    plain mean when the recurrence is toggled off), and the final state is
    pooled into one projection per scale.
    """
    if not chunks:
        raise ShapeError("need at least one chunk")
    pad = cfg.kernel // 2
    embedded = []
    for ch in chunks:
        z = _conv_block(ch, w, "enc2.embed.a", pad)
        embedded.append(_conv_block(z, w, "enc2.embed.b", pad))
    if cfg.use_lstm:
        n, e = embedded[0].data.shape[0], cfg.event_channels
        hw = embedded[0].data.shape[2:]
        h = Tensor(np.zeros((n, e) + hw))
        c = Tensor(np.zeros((n, e) + hw))
        for z in embedded:
            h, c = tk.convlstm_cell(z, h, c, w["enc2.lstm.w"], w["enc2.lstm.b"])
        state = h
    else:
        state = embedded[0]
        for z in embedded[1:]:
            state = tk.add(state, z)
        state = tk.scale(state, 1.0 / len(embedded))
    pyramid = []
    for l in range(cfg.n_scales):
        pyramid.append(_conv_block(state, w, f"enc2.proj.s{l}", pad))
        if l < cfg.n_scales - 1:
            state = tk.avgpool2(state)
    return pyramid


def deblur_module(
    f_imev: list[Tensor],
    f_ev: list[Tensor] | None,
    w: dict[str, Tensor],
    cfg: ModelConfig,
) -> list[Tensor]:
    """Per-scale deblurred features, coarse to fine.

    At each scale the image+event features (fused with upsampled coarser
    output) pass through a deformable conv whose offsets/mask come from the
    event features; with the module toggled off a standard conv runs and
    event features are ignored.
    """
    if len(f_imev) != cfg.n_scales:
        raise ShapeError(f"expected {cfg.n_scales} scales, got {len(f_imev)}")
    if cfg.use_deblur_module and (f_ev is None or len(f_ev) != cfg.n_scales):
        raise ShapeError("deblur module needs an event pyramid of matching depth")
    pad = cfg.kernel // 2
    out: list[Tensor | None] = [None] * cfg.n_scales
    for l in range(cfg.n_scales - 1, -1, -1):
        if l == cfg.n_scales - 1:
            fused = f_imev[l]
        else:
            up = tk.upsample_bilinear2(out[l + 1])
            fused = _conv_block(tk.concat_channels([f_imev[l], up]), w, f"dm.s{l}.fuse", pad)
        if cfg.use_deblur_module:
            trunk = _conv_block(f_ev[l], w, f"dm.s{l}.head", pad)
            offsets = tk.conv2d(trunk, w[f"dm.s{l}.off.w"], w[f"dm.s{l}.off.b"], padding=pad)
            mask = tk.logistic(
                tk.conv2d(trunk, w[f"dm.s{l}.mask.w"], w[f"dm.s{l}.mask.b"], padding=pad)
            )
            deblurred = tk.modulated_deform_conv2d(
                fused, w[f"dm.s{l}.conv.w"], offsets, mask, w[f"dm.s{l}.conv.b"], padding=pad
            )
        else:
            deblurred = tk.conv2d(
                fused, w[f"dm.s{l}.conv.w"], w[f"dm.s{l}.conv.b"], padding=pad
            )
        out[l] = tk.relu(deblurred)
    return out


def _residual_stack(x: Tensor, w: dict[str, Tensor], scale: int, pad: int) -> Tensor:
    for j in range(N_RESIDUAL_BLOCKS):
        inner = _conv_block(x, w, f"dec.s{scale}.blk{j}.a", pad)
        inner = tk.conv2d(
            inner, w[f"dec.s{scale}.blk{j}.b.w"], w[f"dec.s{scale}.blk{j}.b.b"], padding=pad
        )
        x = tk.add(x, inner)
    return x


def blur_pyramid(blur: Tensor, n_scales: int) -> list[Tensor]:
    levels = [blur]
    for _ in range(n_scales - 1):
        levels.append(tk.avgpool2(levels[-1]))
    return levels


def decode_coarse_to_fine(
    f_deblur: list[Tensor], blur: Tensor, w: dict[str, Tensor], cfg: ModelConfig
) -> list[ScalePrediction]:
    """Residual reconstruction on top of the downsampled blurry image.

    Coarsest first; finer scales gate-in the upsampled coarser decoder
    features and add the upsampled coarser residual to their estimate.
    With use_c2f off only the finest scale runs.
    """
    pad = cfg.kernel // 2
    blurs = blur_pyramid(blur, cfg.n_scales)
    if not cfg.use_c2f:
        y = _residual_stack(f_deblur[0], w, 0, pad)
        r0 = tk.conv2d(y, w["dec.s0.out.w"], w["dec.s0.out.b"], padding=pad)
        return [ScalePrediction(0, r0, tk.add(blurs[0], r0))]
    feats: list[Tensor | None] = [None] * cfg.n_scales
    residuals: list[Tensor | None] = [None] * cfg.n_scales
    preds: list[ScalePrediction | None] = [None] * cfg.n_scales
    for l in range(cfg.n_scales - 1, -1, -1):
        if l == cfg.n_scales - 1:
            x = f_deblur[l]
        else:
            up = tk.upsample_bilinear2(feats[l + 1])
            gate = tk.logistic(
                tk.conv2d(
                    tk.concat_channels([f_deblur[l], up]),
                    w[f"dec.s{l}.gate.w"],
                    w[f"dec.s{l}.gate.b"],
                    padding=pad,
                )
            )
            x = tk.add(f_deblur[l], tk.mul(gate, up))
        y = _residual_stack(x, w, l, pad)
        feats[l] = y
        r = tk.conv2d(y, w[f"dec.s{l}.out.w"], w[f"dec.s{l}.out.b"], padding=pad)
        residuals[l] = r
        estimate = tk.add(blurs[l], r)
        if l < cfg.n_scales - 1:
            estimate = tk.add(estimate, tk.upsample_bilinear2(residuals[l + 1]))
        preds[l] = ScalePrediction(l, r, estimate)
    return list(preds)


def forward_arrays(
    blur: np.ndarray,
    voxel: np.ndarray,
    chunks: list[np.ndarray],
    w: dict[str, Tensor],
    cfg: ModelConfig,
) -> list[ScalePrediction]:
    """Forward pass on prepared NCHW batches (see prepare_inputs)."""
    blur_t = Tensor(blur)
    voxel_t = Tensor(voxel)
    f_imev = encode_image_events(blur_t, voxel_t, w, cfg)
    f_ev = None
    if cfg.use_deblur_module:
        f_ev = encode_events_recurrent([Tensor(c) for c in chunks], w, cfg)
    f_deblur = deblur_module(f_imev, f_ev, w, cfg)
    return decode_coarse_to_fine(f_deblur, blur_t, w, cfg)


def forward(
    blur: np.ndarray, stream: EventStream, cfg: ModelConfig, w: dict[str, Tensor]
) -> list[ScalePrediction]:
    """Single-image forward: voxelize, chunk, normalize, run the network."""
    img, voxel, chunks = prepare_inputs(blur, stream, cfg)
    return forward_arrays(
        img[None], voxel[None], [c[None] for c in chunks], w, cfg
    )


def predict_image(
    blur: np.ndarray, stream: EventStream, cfg: ModelConfig, w: dict[str, Tensor]
) -> np.ndarray:
    """Finest-scale estimate as an (H, W) or (H, W, C) float image."""
    estimate = forward(blur, stream, cfg, w)[0].estimate.data[0]
    out = estimate[0] if cfg.image_channels == 1 else np.moveaxis(estimate, 0, 2)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def perceptual_extractor(cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    """Fixed random conv stack standing in for a pretrained feature network."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(23,)))
    layers = []
    cin = cfg.image_channels
    for _ in range(PERCEP_LAYERS):
        fan_in = cin * 9
        wt = Tensor(rng.standard_normal((PERCEP_CHANNELS, cin, 3, 3)) * np.sqrt(2.0 / fan_in))
        bt = Tensor(np.zeros(PERCEP_CHANNELS))
        layers.append((wt, bt))
        cin = PERCEP_CHANNELS
    return layers


def _percep_features(x: Tensor, extractor) -> list[Tensor]:
    feats = []
    for wt, bt in extractor:
        x = tk.relu(tk.conv2d(x, wt, bt, padding=1))
        feats.append(x)
    return feats


def perceptual_proxy_loss(pred: Tensor, gt: Tensor, extractor) -> Tensor:
    """Unit-normalized feature distance averaged over positions and layers."""
    fa = _percep_features(pred, extractor)
    fb = _percep_features(gt, extractor)
    total = None
    for a, b in zip(fa, fb):
        diff = tk.sub(tk.channel_unit_norm(a), tk.channel_unit_norm(b))
        # channel-summed squared distance, averaged over batch and position
        term = tk.scale(tk.mean_all(tk.square(diff)), a.data.shape[1])
        total = term if total is None else tk.add(total, term)
    return total


def loss_multiscale(
    preds: list[ScalePrediction],
    gt: Tensor,
    cfg: ModelConfig,
    extractor=None,
) -> Tensor:
    """Sum over scales of L1 plus weighted perceptual distance to the
    matching 2x2-average-pooled ground truth."""
    gts = blur_pyramid(gt, cfg.n_scales)
    total = None
    for pred in preds:
        target = gts[pred.scale]
        if pred.estimate.data.shape != target.data.shape:
            raise ShapeError(
                f"scale {pred.scale}: estimate {pred.estimate.data.shape} "
                f"vs target {target.data.shape}"
            )
        term = tk.mean_all(tk.abs_(tk.sub(pred.estimate, target)))
        if extractor is not None and cfg.lambda_p > 0:
            term = tk.add(
                term, tk.scale(perceptual_proxy_loss(pred.estimate, target, extractor),
                               cfg.lambda_p)
            )
        total = term if total is None else tk.add(total, term)
    return total
