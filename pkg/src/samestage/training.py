"""Alternating D/G optimization with same-stage patch constraints.

One step:

* ``fake = G(x)`` while collecting the encoder/decoder taps of every stage pair;
* D update on ``(y, fake.detach())``;
* G + heads update on ``gan_g + lambda_nce * multistage + lambda_idt * identity``,
  with patch positions drawn from ``D(fake)`` (detached) and the encoder-branch
  projections detached.
"""
from __future__ import annotations

import hashlib
import json
import logging
import resource
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .config import TrainConfig, config_hash, from_dict, to_dict
from .dag import gather_patches, sample, upsample_scores
from .discriminator import PatchDiscriminator
from .errors import ConfigurationError, DataError, NonFiniteLossError
from .generator import ResnetGenerator
from .heads import ContentHeads
from .losses import PatchPair, gan_loss_d, gan_loss_g, identity_loss, multistage_loss, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "samestage-checkpoint"
CHECKPOINT_VERSION = 1
TIMING_FIELDS = ("sec_per_iter", "memory_peak")


def lr_factor(progress: float, decay_start: float = 0.5) -> float:
    """1 until ``decay_start``, then linear down to 0 at ``progress == 1``."""
    if progress <= decay_start:
        return 1.0
    if decay_start >= 1.0:
        return 1.0
    return max(0.0, (1.0 - progress) / (1.0 - decay_start))


def identity_active(progress: float) -> bool:
    return progress < 0.5


@dataclass
class TrainMetrics:
    iteration: int
    epoch: int
    loss_gan_g: float
    loss_gan_d: float
    loss_multistage: float
    loss_identity: float
    loss_total: float
    sec_per_iter: float
    memory_peak: int
    latent_std: float
    identity_active: bool
    lr_g: float
    lr_d: float
    lr_heads: float
    loss_pairs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _peak_memory(device) -> int:
    if device.type == "cuda":
        return int(torch.cuda.max_memory_allocated(device))
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def latent_spread(latents: torch.Tensor) -> float:
    """Root-mean-square distance of unit latents from their mean (0 when all rows coincide)."""
    if latents.shape[0] < 2:
        return float("nan")
    centered = latents - latents.mean(dim=0, keepdim=True)
    return float(centered.pow(2).sum(dim=1).mean().sqrt())


def set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


class TrainState:
    """Networks, optimizers, sampler rng and progress counters."""

    def __init__(self, cfg: TrainConfig, total_iterations: int = 1):
        self.cfg = cfg
        self.device = torch.device(cfg.device)
        torch.manual_seed(cfg.seed)
        self.G = ResnetGenerator(cfg.generator)
        self.D = PatchDiscriminator(cfg.generator.input_channels, cfg.disc_width)
        self.pairs = list(cfg.stages.pairs)
        probe = 8 * 2 ** cfg.generator.n_downsamples
        channels = {}
        for enc, dec in self.pairs:
            if enc not in self.G.encoder_taps or dec not in self.G.decoder_taps:
                raise ConfigurationError(
                    f"pair (h_{enc}, h_{dec}): encoder taps are {self.G.encoder_taps.start}.."
                    f"{self.G.encoder_taps.stop - 1}, decoder taps {self.G.decoder_taps.start}..{self.G.last_tap}"
                )
            channels[(enc, dec)] = (self.G.tap_shape(enc, probe)[0], self.G.tap_shape(dec, probe)[0])
        aligned = self.pairs if cfg.stages.asymmetric else ()
        self.heads = ContentHeads(channels, cfg.heads, aligned_pairs=aligned)
        for m in (self.G, self.D, self.heads):
            m.to(self.device)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(
            [
                {"params": list(self.G.parameters()), "lr": cfg.lr_g, "name": "generator"},
                {"params": list(self.heads.parameters()), "lr": cfg.lr_heads, "name": "heads"},
            ],
            betas=betas,
        )
        self.opt_d = torch.optim.Adam(
            [{"params": list(self.D.parameters()), "lr": cfg.lr_d, "name": "discriminator"}], betas=betas
        )
        self.sampler_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.iteration = 0
        self.epoch = 0
        self.position = 0
        self.total_iterations = max(1, total_iterations)
        self.taps = sorted({t for p in self.pairs for t in p})
        self.sampling_log: list[dict] | None = [] if cfg.log_sampling else None

    @property
    def progress(self) -> float:
        return self.iteration / self.total_iterations

    def apply_schedule(self):
        f = lr_factor(self.progress, self.cfg.decay_start_fraction)
        base = {"generator": self.cfg.lr_g, "heads": self.cfg.lr_heads, "discriminator": self.cfg.lr_d}
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = base[group["name"]] * f

    def learning_rates(self) -> dict:
        return {g["name"]: g["lr"] for opt in (self.opt_g, self.opt_d) for g in opt.param_groups}

    # -- patch pairs -----------------------------------------------------------
    def patch_pairs(self, feats: dict, fake_scores: torch.Tensor | None):
        cfg = self.cfg
        out = []
        for pair in self.pairs:
            enc, dec = feats[pair[0]], feats[pair[1]]
            if cfg.stages.asymmetric:
                enc, dec = self.heads.pre_project_align(pair, enc, dec)
            grid = tuple(dec.shape[-2:])
            ks, qs, positions = [], [], []
            for b in range(dec.shape[0]):
                dense = upsample_scores(fake_scores[b], grid) if cfg.dag.uses_scores else None
                idx = sample(dense, cfg.dag, self.sampler_rng, grid=grid, source_tap=pair[1])
                ks.append(gather_patches(enc[b], idx))
                qs.append(gather_patches(dec[b], idx))
                positions.append(idx.indices)
                if self.sampling_log is not None:
                    self.sampling_log.append({
                        "iteration": self.iteration, "item": b, "pair": list(pair), "tap": pair[1],
                        "grid": list(grid), "importance_count": idx.importance_count,
                        "indices": idx.indices.tolist(),
                    })
            pos = torch.cat(positions)
            out.append(PatchPair(pair, torch.cat(ks), torch.cat(qs), pos, pos))
        return out

    # -- persistence --------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "params": {
                "generator": self.G.state_dict(),
                "discriminator": self.D.state_dict(),
                "heads": self.heads.state_dict(),
            },
            "optimizers": {"generator_heads": self.opt_g.state_dict(), "discriminator": self.opt_d.state_dict()},
            "progress": {
                "iteration": self.iteration, "epoch": self.epoch, "position": self.position,
                "total_iterations": self.total_iterations,
            },
            "rng": {"sampler": self.sampler_rng.get_state(), "torch": torch.get_rng_state()},
            "config": to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "pairs": {f"h{a}_h{b}": [a, b] for a, b in self.pairs},
        }

    def load_state_dict(self, ckpt: dict):
        self.G.load_state_dict(ckpt["params"]["generator"])
        self.D.load_state_dict(ckpt["params"]["discriminator"])
        self.heads.load_state_dict(ckpt["params"]["heads"])
        self.opt_g.load_state_dict(ckpt["optimizers"]["generator_heads"])
        self.opt_d.load_state_dict(ckpt["optimizers"]["discriminator"])
        prog = ckpt["progress"]
        self.iteration, self.epoch, self.position = prog["iteration"], prog["epoch"], prog["position"]
        self.total_iterations = prog["total_iterations"]
        self.sampler_rng.set_state(ckpt["rng"]["sampler"])
        torch.set_rng_state(ckpt["rng"]["torch"])


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(state.state_dict(), tmp)
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def load_checkpoint(path) -> TrainState:
    ckpt = read_checkpoint(path)
    cfg = from_dict(TrainConfig, ckpt["config"])
    if config_hash(cfg) != ckpt["config_hash"]:
        raise DataError(f"{path}: stored config does not match its hash")
    state = TrainState(cfg, ckpt["progress"]["total_iterations"])
    state.load_state_dict(ckpt)
    return state


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> TrainMetrics:
    cfg = state.cfg
    G, D, heads = state.G, state.D, state.heads
    t0 = time.perf_counter()
    x, y = x.to(state.device), y.to(state.device)
    state.apply_schedule()
    idt_on = identity_active(state.progress) if cfg.identity_half else True

    fake, feats = G(x, taps=state.taps)

    set_requires_grad(D, True)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d = gan_loss_d(D(y), D(fake.detach()))
    if not torch.isfinite(loss_d):
        raise NonFiniteLossError(
            f"non-finite discriminator loss at iteration {state.iteration}",
            {"iteration": state.iteration, "loss_gan_d": float(loss_d.detach())},
        )
    loss_d.backward()
    state.opt_d.step()
    state.opt_d.zero_grad(set_to_none=True)

    set_requires_grad(D, False)
    state.opt_g.zero_grad(set_to_none=True)
    fake_scores = D(fake)
    loss_gan = gan_loss_g(fake_scores)
    pairs = state.patch_pairs(feats, fake_scores.detach())
    loss_ms, per_pair, monitors = multistage_loss(heads, pairs, cfg.stop_gradient)
    if idt_on and cfg.loss_weights.lambda_idt > 0:
        loss_idt = identity_loss(G(y), y)
    else:
        loss_idt = torch.zeros((), device=state.device)
    loss = total_loss(loss_gan, loss_ms, loss_idt, cfg.loss_weights, idt_on)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite generator loss at iteration {state.iteration}",
            {
                "iteration": state.iteration, "loss_gan_g": float(loss_gan.detach()), "loss_multistage": float(loss_ms.detach()),
                "loss_identity": float(loss_idt.detach()), "loss_gan_d": float(loss_d.detach()),
            },
        )
    loss.backward()
    state.opt_g.step()
    set_requires_grad(D, True)

    lrs = state.learning_rates()
    spreads = [latent_spread(m) for m in monitors]
    metrics = TrainMetrics(
        iteration=state.iteration,
        epoch=state.epoch,
        loss_gan_g=float(loss_gan.detach()),
        loss_gan_d=float(loss_d.detach()),
        loss_multistage=float(loss_ms.detach()),
        loss_identity=float(loss_idt.detach()),
        loss_total=float(loss.detach()),
        sec_per_iter=max(time.perf_counter() - t0, 1e-9),
        memory_peak=_peak_memory(state.device),
        latent_std=sum(spreads) / len(spreads),
        identity_active=idt_on,
        lr_g=lrs["generator"],
        lr_d=lrs["discriminator"],
        lr_heads=lrs["heads"],
        loss_pairs={f"h{a}_h{b}": float(v.detach()) for (a, b), v in per_pair.items()},
    )
    state.iteration += 1
    return metrics


@torch.no_grad()
def translate_batch(G: ResnetGenerator, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    was_training = G.training
    G.eval()
    out = torch.cat([G(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)])
    G.train(was_training)
    return out


def _version_stamp() -> dict:
    import subprocess

    stamp = {"package_version": __version__, "torch": torch.__version__}
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def write_run_metadata(out_dir, run_config: dict, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(run_config, indent=2, sort_keys=True)
    (out / "config.json").write_text(text)
    (out / "run.json").write_text(json.dumps({
        "seed": seed, "config_sha256": hashlib.sha256(text.encode()).hexdigest(), **_version_stamp(),
    }, indent=2))


def fit(cfg: TrainConfig, data, out_dir, resume=None, test_data=None, callback=None) -> list[Path]:
    """Train for ``cfg.epochs`` epochs over ``data`` (an :class:`UnpairedDataset`).

    Writes ``metrics.jsonl`` (one record per iteration), ``sampling.jsonl`` (sampler
    history), ``fid.jsonl`` (when ``cfg.fid_every`` and ``test_data`` are given) and
    checkpoints ``epoch_XXXX.pt`` / ``final.pt``.  Returns the checkpoint paths written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    steps_per_epoch = len(data)
    if steps_per_epoch == 0:
        raise DataError("dataset yields no batches (domain A smaller than the batch size)")
    total = cfg.epochs * steps_per_epoch
    if resume is not None:
        state = load_checkpoint(resume)
        state.total_iterations = total
    else:
        state = TrainState(cfg, total)
    mode = "a" if resume is not None else "w"
    written: list[Path] = []

    def eval_fid():
        from .evaluation import fid_between

        xa, xb = test_data
        n = cfg.fid_samples
        value = fid_between(translate_batch(state.G, xa[:n].to(state.device)).cpu(), xb[:n])
        with (out / "fid.jsonl").open("a") as fh:
            fh.write(json.dumps({"epoch": state.epoch, "iteration": state.iteration, "fid": value}) + "\n")
        return value

    do_fid = cfg.fid_every > 0 and test_data is not None
    if do_fid and resume is None:
        (out / "fid.jsonl").unlink(missing_ok=True)
        eval_fid()
    with (out / "metrics.jsonl").open(mode) as mfh, (out / "sampling.jsonl").open(mode) as sfh:
        while state.epoch < cfg.epochs:
            for x, y in data.batches(state.epoch, start=state.position):
                metrics = train_step(state, x, y)
                state.position += 1
                mfh.write(metrics.to_json() + "\n")
                if state.sampling_log:
                    sfh.writelines(json.dumps(r) + "\n" for r in state.sampling_log)
                    state.sampling_log.clear()
                if callback is not None:
                    callback(state, metrics)
            state.epoch += 1
            state.position = 0
            mfh.flush()
            if do_fid and state.epoch % cfg.fid_every == 0:
                eval_fid()
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0 and state.epoch < cfg.epochs:
                written.append(save_checkpoint(state, out / f"epoch_{state.epoch:04d}.pt"))
                log.info("checkpoint at epoch %d", state.epoch)
    written.append(save_checkpoint(state, out / "final.pt"))
    return written
