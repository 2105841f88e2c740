"""Two-phase training, evaluation and the four-way ablation.

Phase A fits only the reconstruction loss on clean images, so the encoder,
decoder and prototype bank learn what undegraded content looks like.  Phase
B fits the full multi-stage objective on degraded/clean pairs.  Phase A is
skipped when memory is disabled, since it only exists to fill the bank.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import arraydiff as ad
from ..arraydiff import Tensor
from ..data import SamplePair, dataset_iter, load_pairs
from ..errors import UsageError
from ..network import StageNetwork, restore
from ..objective import loss_terms, recon_loss
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig
from .metrics import MetricsReport, aggregate, image_metrics, psnr, ssim
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "phase", "total", "char", "edge", "recon", "contrast", "val_psnr", "val_ssim")
ABLATIONS = (
    ("baseline", False, False),
    ("+memory", True, False),
    ("+contrast", False, True),
    ("+memory+contrast", True, True),
)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)

    def network(self) -> StageNetwork:
        return self.checkpoint.network()


def resolve_split(data, split: str) -> list[SamplePair]:
    """Pairs from ``data`` (a list, or a directory that may hold a ``split`` subdirectory)."""
    if isinstance(data, (list, tuple)):
        return list(data)
    root = Path(data)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    sub = root / split
    return load_pairs(sub if sub.is_dir() else root)


def _grads_for(net: StageNetwork, losses) -> tuple[dict[str, np.ndarray], list]:
    """Average gradient over per-sample scalar losses, built one graph at a time."""
    names = {id(t): k for k, t in net.params.items()}
    total: dict[str, np.ndarray] = {}
    values = []
    for build in losses:
        loss = build()
        values.append(loss)
        root = loss.total if hasattr(loss, "total") else loss
        for leaf, g in ad.backward(root, accumulate=False).items():
            key = names.get(id(leaf))
            if key is not None:
                total[key] = total[key] + g if key in total else g
    n = len(values)
    return {k: g / n for k, g in total.items()}, values


def _apply(net: StageNetwork, new_params: dict[str, np.ndarray]) -> StageNetwork:
    return StageNetwork(net.config, {k: Tensor(v, requires_grad=True) for k, v in new_params.items()})


def validate(net: StageNetwork, pairs: Sequence[SamplePair]) -> tuple[float, float]:
    ps, ss = [], []
    for pair in pairs:
        out = restore(net, pair.degraded.values)
        ps.append(psnr(out, pair.clean.values))
        ss.append(ssim(out, pair.clean.values))
    return float(np.mean(ps)), float(np.mean(ss))


def _write_log(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_COLUMNS})


def train(cfg: ExperimentConfig, data, out_dir=None, val=None) -> TrainResult:
    """Train from scratch; writes ``checkpoint.memn`` and ``metrics.csv`` when ``out_dir`` is set."""
    tc = cfg.train
    pairs = resolve_split(data, "train")
    if not pairs:
        raise UsageError("training set is empty")
    val_pairs = resolve_split(val, "test") if val is not None else pairs[: tc.val_count]
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write-test"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise UsageError(f"output directory {out} is not writable: {exc}") from exc

    net = StageNetwork.init(cfg.net, tc.seed)
    state = AdamState.zeros({k: t.data for k, t in net.params.items()})
    stream = dataset_iter(pairs, tc.batch_size, tc.seed, shuffle=True)
    log: list[dict] = []
    phase_a = tc.phase_a_iters if cfg.net.use_memory else 0
    total_iters = phase_a + tc.phase_b_iters

    def snapshot(iteration):
        return Checkpoint.from_network(cfg, net, state, iteration, tc.seed)

    for iteration in range(1, total_iters + 1):
        batch = next(stream)
        if iteration <= phase_a:
            phase = "A"
            builders = [lambda p=p: recon_loss(p.clean.values, net) for p in batch]
        else:
            phase = "B"
            builders = [
                lambda p=p: loss_terms(net.forward(p.degraded.values), p.clean.values, p.degraded.values, net, cfg.loss)
                for p in batch
            ]
        grads, values = _grads_for(net, builders)
        params = {k: t.data for k, t in net.params.items()}
        new_params, state = adam_step(params, grads, state, tc)
        net = _apply(net, new_params)

        if phase == "A":
            row = {"total": float(np.mean([v.item() for v in values])), "recon": float(np.mean([v.item() for v in values]))}
        else:
            terms = [v.as_floats() for v in values]
            row = {k: float(np.mean([t[k] for t in terms])) for k in ("total", "char", "edge", "recon", "contrast")}
        row.update(iteration=iteration, phase=phase)
        if val_pairs and tc.val_every and (iteration % tc.val_every == 0 or iteration == total_iters):
            row["val_psnr"], row["val_ssim"] = validate(net, val_pairs)
            logger.info("iter %d phase %s loss %.4f val psnr %.3f", iteration, phase, row["total"], row["val_psnr"])
        log.append(row)
        if out_dir is not None and tc.checkpoint_every and iteration % tc.checkpoint_every == 0:
            save_checkpoint(snapshot(iteration), Path(out_dir) / "checkpoint.memn")

    ckpt = snapshot(total_iters)
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "checkpoint.memn")
        _write_log(log, Path(out_dir) / "metrics.csv")
    return TrainResult(ckpt, log)


def evaluate(checkpoint: Checkpoint, data, mask_dir=None, out_csv=None) -> MetricsReport:
    """Restore every pair and report mean metrics (region splits when masks exist)."""
    if isinstance(data, (list, tuple)):
        pairs = list(data)
    else:
        root = Path(data)
        sub = root / "test"
        pairs = load_pairs(sub if sub.is_dir() else root, mask_dir=mask_dir)
    if not pairs:
        raise UsageError("evaluation set is empty")
    net = checkpoint.network()
    rows = []
    for pair in pairs:
        net.check_extents(pair.degraded.values)
        out = restore(net, pair.degraded.values)
        row = image_metrics(out, pair.clean.values, pair.mask.values if pair.mask is not None else None)
        row["name"] = pair.name
        rows.append(row)
    rep = aggregate(rows)
    if out_csv is not None:
        write_metrics_csv(rep, out_csv)
    return rep


def write_metrics_csv(rep: MetricsReport, path) -> None:
    columns = ["name", *[k for k in rep.FIELDS if rep.rows and rep.rows[0].get(k) is not None]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rep.rows:
            writer.writerow([row.get("name", "")] + [f"{row[k]:.6f}" for k in columns[1:]])
        writer.writerow(["mean"] + [f"{getattr(rep, k):.6f}" for k in columns[1:]])


def baseline_report(pairs: Sequence[SamplePair]) -> MetricsReport:
    """Metrics of the degraded inputs themselves (what doing nothing scores)."""
    rows = [
        image_metrics(p.degraded.values, p.clean.values, p.mask.values if p.mask is not None else None)
        for p in pairs
    ]
    return aggregate(rows)


def ablate(cfg: ExperimentConfig, data, out_dir=None, test=None, configs=ABLATIONS) -> list[dict]:
    """Train each switch combination with the same seed and evaluate on the test split."""
    train_pairs = resolve_split(data, "train")
    test_pairs = resolve_split(test if test is not None else data, "test")
    rows = []
    for label, memory, contrast in configs:
        sub = cfg.with_switches(memory, contrast)
        run_dir = Path(out_dir) / label.strip("+").replace("+", "_") if out_dir is not None else None
        result = train(sub, train_pairs, run_dir, val=test_pairs)
        rep = evaluate(result.checkpoint, test_pairs)
        rows.append({"config": label, "memory": memory, "contrast": contrast, **rep.as_dict()})
        logger.info("ablation %s: psnr %.3f ssim %.4f", label, rep.psnr, rep.ssim)
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    keys = ["config", "memory", "contrast", "psnr", "ssim", "rmse_lab", "rmse_s", "rmse_n"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v
