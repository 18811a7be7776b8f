"""Training and inference orchestration.

Configuration is a flat ``key=value`` file (``#`` comments allowed).  Presets
named after the benchmark protocols fill in epochs/crop defaults; explicit
keys always win.  Every training entry point writes, under its output
directory: a checkpoint plus JSON sidecar, an ``epoch,loss`` CSV log, and a
rendered loss-curve figure.

Checkpoint sidecars carry fingerprints of the codec weights they were trained
against, so loading a mismatched trio fails fast instead of silently decoding
latents with the wrong decoder.  The denoiser records a fingerprint of the
*encoder* half only — fine-tuning the decoder in stage two must not
invalidate it — while the detail injector records the full codec state.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (
    CodecConfig,
    ConvCodec,
    _tile_out_channels,
    encode,
    expand_io_channels,
    image_to_tensor,
    merge,
    partition,
    tensor_to_image,
)
from .data import load_pair_dataset, orient, orient_pair, random_crop_pair, resize
from .denoiser import (
    DenoiserConfig,
    LatentDenoiser,
    build_conditioned_denoiser,
    predict_clean,
)
from .detail_injection import (
    DetailInjector,
    InjectionConfig,
    SemanticEmbedder,
    decode_with_injection_tensors,
    semantic_features,
)
from .losses import PerceptualExtractor, stage_one_loss, stage_two_loss
from .report import loss_curve_figure, write_training_log
from .schedule import forward_noise, make_ddim_plan, make_noise_schedule, sample

__all__ = [
    "TrainConfig",
    "PRESETS",
    "parse_train_config",
    "train_codec",
    "train_stage_one",
    "train_stage_two",
    "ShadowRemover",
    "remove_shadow",
    "stable_sample_seed",
    "state_fingerprint",
    "encoder_fingerprint",
]

# Epoch/crop presets mirroring the benchmark training protocols.
PRESETS: dict[str, dict] = {
    "istd_plus": {"stage_one_epochs": 200, "stage_two_epochs": 300, "crop_size": 480},
    "srd": {"stage_one_epochs": 300, "stage_two_epochs": 200, "crop_size": 480},
    "ins": {"stage_one_epochs": 40, "stage_two_epochs": 50, "crop_size": 480},
    "wsrd_plus": {
        "stage_one_epochs": 400,
        "stage_two_epochs": 100,
        "crop_size": 512,
        "hi_res_k": 3,
    },
}

_STAGES = ("codec", "one", "two")
_DEFAULT_LR = {"codec": 1e-3, "one": 3e-4, "two": 5e-4}


@dataclass
class TrainConfig:
    stage: str = "one"
    dataset_root: str = ""
    learning_rate: float | None = None
    batch_size: int = 16
    epochs: int = 200
    crop_size: int = 480
    optimizer: str = "adam"
    seed: int = 0
    steps: int = 10
    eta: float = 0.0
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hi_res_k: int = 1
    freeze_decoder: bool = True
    use_semantic: bool = True
    semantic_seed: int = 0
    augment_orientations: bool = False

    def __post_init__(self):
        if self.stage not in _STAGES:
            raise ValueError(f"stage must be one of {_STAGES}, got {self.stage!r}")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.learning_rate is None:
            self.learning_rate = _DEFAULT_LR[self.stage]
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.crop_size < 16 or self.crop_size % 16:
            raise ValueError(f"crop_size must be a positive multiple of 16, got {self.crop_size}")
        if self.steps < 1 or not 0.0 <= self.eta <= 1.0:
            raise ValueError("steps must be >= 1 and eta in [0, 1]")
        if self.hi_res_k < 1:
            raise ValueError(f"hi_res_k must be >= 1, got {self.hi_res_k}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", "float | None", float):
        return float(raw)
    if typ in ("bool", bool):
        low = raw.strip().lower()
        if low in ("true", "false"):
            return low == "true"
        raise ValueError(f"config key {key!r} expects true/false, got {raw!r}")
    return raw


def _parse_kv_lines(text: str, source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_train_config(
    path: str | Path | None, overrides: dict[str, str] | None = None
) -> TrainConfig:
    """Parse a flat config file, apply overrides, and validate.

    Unknown keys abort with a message naming the key.  A ``preset=<name>``
    line expands to that protocol's epochs/crop defaults for the configured
    stage; explicit keys (and overrides) take precedence.
    """
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(_parse_kv_lines(Path(path).read_text(), str(path)))
    if overrides:
        raw.update({str(k): str(v) for k, v in overrides.items()})

    preset_name = raw.pop("preset", None)
    stage = raw.get("stage", "one")
    kwargs: dict = {}
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ValueError(
                f"unknown preset {preset_name!r}; available: {sorted(PRESETS)}"
            )
        preset = PRESETS[preset_name]
        kwargs["crop_size"] = preset["crop_size"]
        kwargs["hi_res_k"] = preset.get("hi_res_k", 1)
        if stage == "one":
            kwargs["epochs"] = preset["stage_one_epochs"]
        elif stage == "two":
            kwargs["epochs"] = preset["stage_two_epochs"]

    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key: {key}")
        kwargs[key] = _coerce(key, value)
    return TrainConfig(**kwargs)


def stable_sample_seed(base_seed: int, image_id: str) -> int:
    """Deterministic per-sample seed, stable across processes."""
    digest = hashlib.sha256(f"{base_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def state_fingerprint(module: torch.nn.Module, prefixes: tuple[str, ...] | None = None) -> str:
    """Hash of a module's weights, optionally restricted to key prefixes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        if prefixes is not None and not name.startswith(prefixes):
            continue
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def encoder_fingerprint(codec: ConvCodec) -> str:
    """Fingerprint of the image-to-latent half only."""
    return state_fingerprint(codec, prefixes=("enc_stages.", "to_latent."))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _finish_training(
    out_dir: Path,
    ckpt_name: str,
    state_dict: dict,
    meta: dict,
    losses: list[float],
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_training_log(out_dir / "training_log.csv", list(enumerate(losses, start=1)))
    loss_curve_figure(out_dir / "loss_curve.png", losses, title=f"{meta['role']} loss")
    meta = {**meta, "epochs": len(losses), "final_loss": losses[-1] if losses else None}
    return save_checkpoint(out_dir / ckpt_name, state_dict, meta)


def _crop_for(cfg: TrainConfig, shapes: list[tuple[int, int]], grid: int) -> int:
    crop = min([cfg.crop_size] + [min(h, w) for h, w in shapes])
    crop -= crop % grid
    if crop < grid:
        raise ValueError(f"images too small: need at least {grid}x{grid} after cropping")
    return crop


def train_codec(
    cfg: TrainConfig, out_dir: str | Path, codec_config: CodecConfig | None = None
) -> Path:
    """Train the image codec on both sides of every pair (L1 reconstruction).

    A small L2 penalty on the latent keeps its scale near unity so the
    diffusion stage sees targets comparable to its noise.
    """
    out_dir = Path(out_dir)
    codec_config = codec_config or CodecConfig()
    torch.manual_seed(cfg.seed)
    codec = ConvCodec(codec_config)
    dataset = load_pair_dataset(cfg.dataset_root, "train")
    pairs = list(dataset)
    images = [p.input for p in pairs] + [p.target for p in pairs]
    crop = _crop_for(cfg, [i.shape[:2] for i in images], codec_config.spatial_downscale)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)

    losses: list[float] = []
    for _ in range(cfg.epochs):
        epoch_loss, count = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            batch = []
            for i in idx:
                img = images[int(i)]
                top = int(rng.integers(0, img.shape[0] - crop + 1))
                left = int(rng.integers(0, img.shape[1] - crop + 1))
                window = img[top : top + crop, left : left + crop]
                if cfg.augment_orientations:
                    window = orient(window, int(rng.integers(8)))
                batch.append(window)
            x = torch.stack([image_to_tensor(b)[0] for b in batch])
            recon, z = codec(x)
            loss = (recon - x).abs().mean() + 1e-3 * (z**2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        losses.append(epoch_loss / count)

    meta = {
        "role": "codec",
        "config": codec_config.to_dict(),
        "dataset_tag": dataset.tag,
        "train_config": cfg.to_dict(),
    }
    return _finish_training(out_dir, "codec.pt", codec.state_dict(), meta, losses)


def _load_codec(path: str | Path) -> tuple[ConvCodec, dict]:
    state, meta = load_checkpoint(path, expected_role="codec")
    codec = ConvCodec(CodecConfig(**meta["config"]))
    codec.load_state_dict(state)
    codec.eval()
    codec.requires_grad_(False)
    return codec, meta


def _encode_pairs(codec: ConvCodec, pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for pair in pairs:
        z_x, _ = encode(codec, pair.input)
        z_y, _ = encode(codec, pair.target)
        out.append((z_x, z_y))
    return out


def train_stage_one(
    cfg: TrainConfig,
    codec_ckpt: str | Path,
    out_dir: str | Path,
    denoiser_config: DenoiserConfig | None = None,
) -> Path:
    """Train the conditioned latent denoiser against frozen-codec latents."""
    out_dir = Path(out_dir)
    codec, codec_meta = _load_codec(codec_ckpt)
    schedule = make_noise_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    dcfg = denoiser_config or DenoiserConfig(latent_channels=codec.config.latent_channels)
    if dcfg.latent_channels != codec.config.latent_channels:
        raise ValueError(
            f"denoiser expects {dcfg.latent_channels} latent channels, codec has "
            f"{codec.config.latent_channels}"
        )
    torch.manual_seed(cfg.seed)
    net = build_conditioned_denoiser(dcfg)
    dataset = load_pair_dataset(cfg.dataset_root, "train")
    pairs = list(dataset)
    crop = _crop_for(cfg, [p.input.shape[:2] for p in pairs], codec.config.spatial_downscale)
    identity_crop = all(p.input.shape[:2] == (crop, crop) for p in pairs)
    rng = np.random.default_rng(cfg.seed)
    cacheable = identity_crop and not cfg.augment_orientations
    latents = _encode_pairs(codec, pairs) if cacheable else None
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    def to_batch(arrs):
        return torch.stack(
            [image_to_tensor(np.asarray(a, dtype=np.float32))[0] for a in arrs]
        )

    losses: list[float] = []
    for _ in range(cfg.epochs):
        epoch_loss, count = 0.0, 0
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            if latents is not None:
                batch_latents = [latents[int(i)] for i in idx]
            else:
                crops = [random_crop_pair(pairs[int(i)], crop, rng) for i in idx]
                if cfg.augment_orientations:
                    crops = [orient_pair(c, int(rng.integers(8))) for c in crops]
                batch_latents = _encode_pairs(codec, crops)
            zts, zxs, targets, ts = [], [], [], []
            for z_x, z_y in batch_latents:
                t = int(rng.integers(1, schedule.num_steps + 1))
                eps = rng.standard_normal(z_y.shape)
                zts.append(forward_noise(z_y, t, eps, schedule))
                zxs.append(z_x)
                ts.append(t)
                targets.append(z_y if dcfg.parameterization == "z0_pred" else eps)
            raw = net(to_batch(zts), to_batch(zxs), torch.tensor(ts, dtype=torch.long))
            loss = stage_one_loss(raw, to_batch(targets))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        losses.append(epoch_loss / count)

    meta = {
        "role": "denoiser",
        "config": dcfg.to_dict(),
        "schedule": {
            "num_steps": cfg.schedule_steps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
        },
        "codec_config": codec_meta["config"],
        "encoder_fingerprint": encoder_fingerprint(codec),
        "dataset_tag": dataset.tag,
        "train_config": cfg.to_dict(),
    }
    return _finish_training(out_dir, "denoiser.pt", net.state_dict(), meta, losses)


def _sample_clean_latent(net, schedule, plan, z_x: np.ndarray, seed: int) -> np.ndarray:
    def predictor(z_t, z_cond, t):
        return predict_clean(net, z_t, z_cond, t, schedule)

    return sample(predictor, z_x, plan, schedule, seed).astype(np.float32)


def train_stage_two(
    cfg: TrainConfig,
    codec_ckpt: str | Path,
    denoiser_ckpt: str | Path,
    out_dir: str | Path,
    injection_config: InjectionConfig | None = None,
) -> Path:
    """Train detail injection on clean latents sampled from stage one.

    Each sample's latent is drawn once, with a per-sample seed derived from
    the config seed and the image id, then reused every epoch.  The decoder
    stays frozen unless ``freeze_decoder=false``, in which case the tuned
    codec is saved next to the injector checkpoint as ``codec_tuned.pt``.
    """
    out_dir = Path(out_dir)
    codec, codec_meta = _load_codec(codec_ckpt)
    den_state, den_meta = load_checkpoint(denoiser_ckpt, expected_role="denoiser")
    if den_meta["encoder_fingerprint"] != encoder_fingerprint(codec):
        raise ValueError("denoiser was trained against a different codec checkpoint")
    dcfg = DenoiserConfig.from_dict(den_meta["config"])
    net = LatentDenoiser(dcfg)
    net.load_state_dict(den_state)
    net.eval()
    net.requires_grad_(False)
    schedule = make_noise_schedule(**den_meta["schedule"])
    plan = make_ddim_plan(schedule, cfg.steps, cfg.eta)

    n_branches = codec.config.num_stages - 1
    if injection_config is None:
        injection_config = InjectionConfig(
            num_branches=n_branches,
            use_semantic=cfg.use_semantic,
            semantic_branches=(1, 2) if cfg.use_semantic else (),
        )
    torch.manual_seed(cfg.seed)
    injector = DetailInjector(injection_config, codec)
    needs_sem = bool(injection_config.use_semantic and injection_config.semantic_branches)
    embedder = (
        SemanticEmbedder(out_channels=injection_config.semantic_channels, seed=cfg.semantic_seed)
        if needs_sem
        else None
    )
    extractor = PerceptualExtractor(seed=0)

    dataset = load_pair_dataset(cfg.dataset_root, "train")
    pairs = list(dataset)
    # Crops must respect both the codec grid and the 1/16 semantic token grid.
    grid = max(16, codec.config.spatial_downscale)
    crop = _crop_for(cfg, [p.input.shape[:2] for p in pairs], grid)
    identity_crop = all(p.input.shape[:2] == (crop, crop) for p in pairs)
    rng = np.random.default_rng(cfg.seed)

    def prepare(pair):
        z_x, taps = encode(codec, pair.input)
        z0 = _sample_clean_latent(
            net, schedule, plan, z_x, stable_sample_seed(cfg.seed, pair.image_id)
        )
        sem = semantic_features(pair.input, embedder) if embedder is not None else None
        return z0, taps.taps, sem, pair.target

    cacheable = identity_crop and not cfg.augment_orientations
    cache = [prepare(p) for p in pairs] if cacheable else None

    params = list(injector.parameters())
    if not cfg.freeze_decoder:
        codec.from_latent.requires_grad_(True)
        codec.dec_stages.requires_grad_(True)
        params += list(codec.from_latent.parameters()) + list(codec.dec_stages.parameters())
    frozen_before = state_fingerprint(codec)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    losses: list[float] = []
    for _ in range(cfg.epochs):
        epoch_loss, count = 0.0, 0
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            if cache is not None:
                items = [cache[int(i)] for i in idx]
            else:
                views = [random_crop_pair(pairs[int(i)], crop, rng) for i in idx]
                if cfg.augment_orientations:
                    views = [orient_pair(v, int(rng.integers(8))) for v in views]
                items = [prepare(v) for v in views]
            z0 = torch.stack([image_to_tensor(it[0])[0] for it in items])
            taps = [
                torch.stack([image_to_tensor(it[1][level])[0] for it in items])
                for level in range(codec.config.num_stages)
            ]
            sem = (
                torch.stack([image_to_tensor(it[2])[0] for it in items])
                if items[0][2] is not None
                else None
            )
            target = torch.stack([image_to_tensor(it[3])[0] for it in items])
            pred, _ = decode_with_injection_tensors(codec, injector, z0, taps, sem)
            loss = stage_two_loss(pred, target, extractor)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
            count += len(idx)
        losses.append(epoch_loss / count)

    if cfg.freeze_decoder and state_fingerprint(codec) != frozen_before:
        raise RuntimeError("frozen decoder changed during stage-two training")

    meta = {
        "role": "detail_injection",
        "config": injection_config.to_dict(),
        "semantic_seed": cfg.semantic_seed,
        "use_semantic": needs_sem,
        "freeze_decoder": cfg.freeze_decoder,
        "codec_config": codec_meta["config"],
        "codec_fingerprint": state_fingerprint(codec),
        "dataset_tag": dataset.tag,
        "train_config": cfg.to_dict(),
    }
    path = _finish_training(out_dir, "injector.pt", injector.state_dict(), meta, losses)
    if not cfg.freeze_decoder:
        save_checkpoint(
            out_dir / "codec_tuned.pt",
            codec.state_dict(),
            {**codec_meta, "role": "codec", "tuned_by": "stage_two"},
        )
    return path


class ShadowRemover:
    """Loaded two-stage model; callable as ``remover(image, seed)``."""

    def __init__(
        self,
        codec: ConvCodec,
        denoiser: LatentDenoiser,
        schedule,
        injector: DetailInjector | None = None,
        embedder: SemanticEmbedder | None = None,
        steps: int = 10,
        eta: float = 0.0,
        dataset_tag: str | None = None,
    ):
        if denoiser.config.latent_channels != codec.config.latent_channels:
            raise ValueError("codec and denoiser disagree on latent channels")
        if injector is not None and len(injector.branches) != codec.config.num_stages - 1:
            raise ValueError("injector does not match this codec's stage count")
        self.codec = codec
        self.denoiser = denoiser
        self.schedule = schedule
        self.injector = injector
        self.embedder = embedder
        self.steps = steps
        self.eta = eta
        self.dataset_tag = dataset_tag
        self.plan = make_ddim_plan(schedule, steps, eta)
        self._expanded: dict[int, tuple[ConvCodec, DetailInjector | None]] = {}

    @classmethod
    def from_checkpoints(
        cls,
        codec_ckpt: str | Path,
        denoiser_ckpt: str | Path,
        injector_ckpt: str | Path | None = None,
        steps: int = 10,
        eta: float = 0.0,
    ) -> "ShadowRemover":
        codec, codec_meta = _load_codec(codec_ckpt)
        den_state, den_meta = load_checkpoint(denoiser_ckpt, expected_role="denoiser")
        versions = {codec_meta["schema_version"], den_meta["schema_version"]}
        if den_meta["encoder_fingerprint"] != encoder_fingerprint(codec):
            raise ValueError("denoiser was trained against a different codec checkpoint")
        dcfg = DenoiserConfig.from_dict(den_meta["config"])
        denoiser = LatentDenoiser(dcfg)
        denoiser.load_state_dict(den_state)
        denoiser.eval()
        denoiser.requires_grad_(False)
        schedule = make_noise_schedule(**den_meta["schedule"])

        injector = embedder = None
        tag = den_meta.get("dataset_tag")
        if injector_ckpt is not None:
            inj_state, inj_meta = load_checkpoint(injector_ckpt, expected_role="detail_injection")
            versions.add(inj_meta["schema_version"])
            if inj_meta["codec_fingerprint"] != state_fingerprint(codec):
                raise ValueError(
                    "detail injector was trained against a different codec checkpoint"
                )
            inj_cfg = InjectionConfig.from_dict(inj_meta["config"])
            injector = DetailInjector(inj_cfg, codec)
            injector.load_state_dict(inj_state)
            injector.eval()
            injector.requires_grad_(False)
            if inj_meta.get("use_semantic"):
                embedder = SemanticEmbedder(
                    out_channels=inj_cfg.semantic_channels,
                    seed=inj_meta["semantic_seed"],
                )
            tag = inj_meta.get("dataset_tag", tag)
        if len(versions) != 1:
            raise ValueError(f"checkpoint schema versions disagree: {versions}")
        return cls(
            codec,
            denoiser,
            schedule,
            injector=injector,
            embedder=embedder,
            steps=steps,
            eta=eta,
            dataset_tag=tag,
        )

    def __call__(self, image: np.ndarray, seed: int = 1) -> np.ndarray:
        return self.remove(image, seed=seed)

    def _expanded_models(self, k: int):
        if k not in self._expanded:
            exp_codec = expand_io_channels(self.codec, k)
            exp_injector = None
            if self.injector is not None:
                exp_injector = DetailInjector(self.injector.config, exp_codec)
                exp_injector.branches.load_state_dict(self.injector.branches.state_dict())
                with torch.no_grad():
                    exp_injector.out_conv.weight.copy_(
                        _tile_out_channels(self.injector.out_conv.weight, k * k)
                    )
                    exp_injector.out_conv.bias.copy_(self.injector.out_conv.bias.repeat(k * k))
                exp_injector.eval()
                exp_injector.requires_grad_(False)
            self._expanded[k] = (exp_codec, exp_injector)
        return self._expanded[k]

    def remove(
        self,
        image: np.ndarray,
        seed: int = 1,
        hi_res_k: int = 1,
        use_stage_two: bool = True,
        return_info: bool = False,
    ):
        """Remove the shadow from one image.

        For ``hi_res_k > 1`` the diffusion stage runs on the k-downscaled
        image, while decoding runs on the k x k block-partitioned
        full-resolution image through the channel-expanded codec, so the
        output keeps the input's resolution.
        """
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
        k = int(hi_res_k)
        if k < 1:
            raise ValueError(f"hi_res_k must be >= 1, got {k}")
        h, w = image.shape[:2]
        grid = 16 * k
        if h % grid or w % grid:
            raise ValueError(f"image {h}x{w} must be divisible by {grid} (16 x hi_res_k)")
        small = resize(image, (h // k, w // k), "bicubic_antialias") if k > 1 else image
        z_x, _ = encode(self.codec, small)
        z0 = _sample_clean_latent(self.denoiser, self.schedule, self.plan, z_x, seed)

        use_injection = use_stage_two and self.injector is not None
        sem = (
            semantic_features(small, self.embedder)
            if use_injection and self.embedder is not None
            else None
        )
        if k > 1:
            work_codec, work_injector = self._expanded_models(k)
            work_input = partition(image, k)
        else:
            work_codec, work_injector = self.codec, self.injector
            work_input = image

        with torch.no_grad():
            if use_injection:
                _, taps = work_codec.encode_tensor(image_to_tensor(work_input))
                out_t, _ = decode_with_injection_tensors(
                    work_codec,
                    work_injector,
                    image_to_tensor(z0),
                    taps,
                    image_to_tensor(sem) if sem is not None else None,
                )
            else:
                out_t, _ = work_codec.decode_tensor(image_to_tensor(z0))
        out = tensor_to_image(out_t)
        if k > 1:
            out = merge(out, k)
        if return_info:
            info = {
                "stage_one_size": tuple(small.shape[:2]),
                "hi_res_k": k,
                "steps": self.steps,
                "used_stage_two": bool(use_injection),
                "used_semantic": sem is not None,
            }
            return out, info
        return out


def remove_shadow(
    image: np.ndarray,
    remover: ShadowRemover,
    seed: int = 1,
    hi_res_k: int = 1,
    use_stage_two: bool = True,
) -> np.ndarray:
    """Functional wrapper over :meth:`ShadowRemover.remove`."""
    return remover.remove(image, seed=seed, hi_res_k=hi_res_k, use_stage_two=use_stage_two)
