"""Training loop, checkpointing, and the finite-difference verification harness."""
from __future__ import annotations

import csv
import math
import random
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import TrainConfig
from .corpus import Dataset, SyntheticSpec, synth_samples
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .evaluation import DEFAULT_KS, GroundTruth, encode_dataset, recall_at_k, score_all
from .model import Batch, SmfeaModel, collate
from .objective import joint_loss, similarity_matrix
from .treeenc import TreeNodeStates
from .vocab import CategoryDicts, WordVocab, build_category_dicts, build_word_vocab

CHECKPOINT_VERSION = 1
LOSS_LOG_HEADER = ("epoch", "step", "rank", "ce", "kl", "total")
KINK_TOL = 1e-3
GRADCHECK_COMPONENTS = ("linear", "encoders", "treeenc", "objective", "end2end")


@contextmanager
def deterministic_mode(enabled: bool):
    """Single-threaded, deterministic kernels while the block runs."""
    if not enabled:
        yield
        return
    prior_threads = torch.get_num_threads()
    prior_flag = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prior_threads)
        torch.use_deterministic_algorithms(prior_flag)


def split_dataset(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded train/validation split; the split depends only on (n, fraction, seed)."""
    indices = list(range(len(dataset)))
    random.Random(seed).shuffle(indices)
    n_val = int(len(dataset) * val_fraction)
    val = [dataset[i] for i in sorted(indices[:n_val])]
    train = [dataset[i] for i in sorted(indices[n_val:])]
    return train, val


@dataclass
class TrainResult:
    model: SmfeaModel
    config: TrainConfig
    loss_rows: list[dict]
    val_rows: list[dict]
    checkpoint_path: Path | None = None


def _loss_for_batch(model: SmfeaModel, batch: Batch):
    outputs = model(batch)
    sim = similarity_matrix(outputs.visual_fused, outputs.textual_fused)
    cfg = model.config
    return joint_loss(
        sim,
        outputs.visual_states,
        outputs.textual_states,
        batch.fragment_targets,
        batch.relation_targets,
        margin=cfg.margin,
        negatives=cfg.negatives,
        rank_weight=cfg.rank_weight,
        ce_weight=cfg.ce_weight,
        kl_weight=cfg.kl_weight,
    )


def _check_finite(breakdown, epoch: int, step: int) -> None:
    for name in ("rank", "ce", "kl", "total"):
        value = getattr(breakdown, name)
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss term '{name}' ({value}) at epoch {epoch} step {step}"
            )


def _val_metrics(model: SmfeaModel, val: Dataset, vocab, dicts, epoch: int) -> dict:
    images, sentences, image_ids, sentence_ids = encode_dataset(model, val, vocab, dicts)
    sim = score_all(images, sentences, image_ids, sentence_ids)
    gt = GroundTruth.from_dataset(val)
    row = {"epoch": epoch}
    for direction in ("i2t", "t2i"):
        for k in DEFAULT_KS:
            if k <= len(val):
                row[f"r{k}_{direction}"] = recall_at_k(sim, k, direction, gt)
    return row


def train(
    config: TrainConfig,
    dataset: Dataset,
    vocab: WordVocab,
    dicts: CategoryDicts,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Mini-batch optimization of the joint loss with the stepped lr schedule."""
    if len(dataset) < config.batch_size:
        raise ConfigurationError(
            f"dataset has {len(dataset)} samples, fewer than batch_size={config.batch_size}"
        )
    with deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        train_set, val_set = split_dataset(dataset, config.val_fraction, config.seed)
        model = SmfeaModel(config, vocab.size(), dicts.n_fragment, dicts.n_relation)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        order_rng = random.Random(config.seed + 1)

        loss_rows: list[dict] = []
        val_rows: list[dict] = []
        step = 0
        for epoch in range(1, config.max_epochs + 1):
            lr = config.learning_rate(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = list(range(len(train_set)))
            order_rng.shuffle(order)
            model.train()
            for start in range(0, len(order), config.batch_size):
                chunk = [train_set[i] for i in order[start : start + config.batch_size]]
                if len(chunk) < 2:
                    continue  # a lone tail sample has no in-batch negatives
                batch = collate(chunk, vocab, dicts, config.dtype)
                total, breakdown = _loss_for_batch(model, batch)
                step += 1
                _check_finite(breakdown, epoch, step)
                optimizer.zero_grad()
                total.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                loss_rows.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "rank": breakdown.rank,
                        "ce": breakdown.ce,
                        "kl": breakdown.kl,
                        "total": breakdown.total,
                    }
                )
            if val_set:
                val_rows.append(_val_metrics(model, val_set, vocab, dicts, epoch))

        checkpoint_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            checkpoint_path = out_dir / "checkpoint.pt"
            save_checkpoint(checkpoint_path, model, optimizer, epoch=config.max_epochs)
            write_loss_log(out_dir / "loss_log.csv", loss_rows)
            if val_rows:
                write_csv(out_dir / "val_metrics.csv", val_rows)
            config.save(out_dir / "config.json")
    return TrainResult(model, config, loss_rows, val_rows, checkpoint_path)


def write_loss_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOSS_LOG_HEADER)
        for row in rows:
            writer.writerow(
                [row["epoch"], row["step"]] + [repr(row[k]) for k in ("rank", "ce", "kl", "total")]
            )


def write_csv(path: str | Path, rows: list[dict]) -> None:
    fields = sorted({key for row in rows for key in row}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# -- checkpointing ----------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    meta: dict
    epoch: int
    model_state: dict
    optimizer_state: dict | None

    def build_model(self) -> SmfeaModel:
        model = SmfeaModel(self.config, **self.meta)
        model.load_state_dict(self.model_state)
        return model


def save_checkpoint(path: str | Path, model: SmfeaModel, optimizer=None, epoch: int = 0) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "meta": dict(model.meta),
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} != supported {CHECKPOINT_VERSION}"
        )
    config = TrainConfig.from_dict(payload["config"])
    if expected_config is not None and (
        expected_config.arch_fingerprint() != config.arch_fingerprint()
    ):
        raise CheckpointError(
            "config conflict: checkpoint architecture "
            f"({config.cell_variant}, dims {config.d_region}/{config.d_embed}/"
            f"{config.d_node}/{config.word_dim}, {config.precision}) does not match "
            f"the requested configuration"
        )
    return Checkpoint(
        config=config,
        meta=payload["meta"],
        epoch=payload["epoch"],
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
    )


# -- gradient verification ---------------------------------------------------


@dataclass
class GradCheckReport:
    component: str
    eps: float
    max_rel_error: float
    worst_block: str
    block_errors: dict[str, float]
    resampled: int
    elapsed_seconds: float

    def __str__(self) -> str:
        return (
            f"gradcheck[{self.component}]: max relative error {self.max_rel_error:.3e} "
            f"in block '{self.worst_block}' ({len(self.block_errors)} blocks, "
            f"eps={self.eps:g}, resampled {self.resampled}, "
            f"{self.elapsed_seconds:.1f}s)"
        )


def _tiny_config(seed: int) -> TrainConfig:
    return TrainConfig(
        d_region=6,
        d_embed=16,
        d_node=8,
        word_dim=4,
        precision="double",
        seed=seed,
        batch_size=3,
    )


def _tiny_batch(seed: int) -> tuple[Batch, WordVocab, CategoryDicts]:
    # equal-length sentences keep the PAD embedding row out of the forward pass
    spec = SyntheticSpec(
        n_pairs=3,
        n_fragment_types=5,
        n_relation_types=4,
        regions_per_image=4,
        d_region=6,
        noise_sigma=0.05,
        seed=seed,
    )
    samples = synth_samples(spec)
    vocab = build_word_vocab(samples)
    dicts = build_category_dicts(samples)
    return collate(samples, vocab, dicts, torch.float64), vocab, dicts


def _hinge_kink_distance(sim: torch.Tensor, margin: float) -> float:
    b = sim.shape[0]
    matched = sim.diagonal()
    off = ~torch.eye(b, dtype=torch.bool)
    args = torch.cat(
        [
            (margin - matched[:, None] + sim)[off].reshape(-1),
            (margin - matched[None, :] + sim)[off].reshape(-1),
        ]
    )
    return float(args.abs().min())


def _numeric_block_errors(loss_fn, params: list[tuple[str, torch.Tensor]], eps: float) -> dict:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    errors: dict[str, float] = {}
    for (name, param), grad in zip(params, grads):
        analytic = torch.zeros_like(param) if grad is None else grad
        numeric = torch.zeros_like(param)
        flat = param.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        with torch.no_grad():
            for j in range(flat.numel()):
                original = flat[j].item()
                flat[j] = original + eps
                up = float(loss_fn())
                flat[j] = original - eps
                down = float(loss_fn())
                flat[j] = original
                numeric_flat[j] = (up - down) / (2 * eps)
        # relative error with a unit floor, so near-zero gradients compare absolutely
        denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1.0)
        errors[name] = float(((analytic - numeric).abs() / denom).max())
    return errors


def _linear_probe(seed: int):
    torch.manual_seed(seed)
    from .objective import FusionWeights, fuse

    weights = FusionWeights(0.6, 0.2, 0.2)
    d = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    c = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(3, 16, dtype=torch.float64)

    def loss_fn():
        return (fuse(d, t, weights, c) * probe).sum()

    return loss_fn, [("instance", d), ("tree", t), ("concept", c)], None


def _encoders_probe(seed: int):
    torch.manual_seed(seed)
    from .encoders import RegionPooling, SentenceEncoder

    batch, vocab, _ = _tiny_batch(seed)
    pool = RegionPooling(6, 16, dtype=torch.float64)
    encoder = SentenceEncoder(vocab.size(), 4, 16, dtype=torch.float64)
    probe_v = torch.randn(3, 16, dtype=torch.float64)
    probe_s = torch.randn(3, 16, dtype=torch.float64)
    probe_w = torch.randn(3, batch.token_ids.shape[1], 16, dtype=torch.float64)

    def loss_fn():
        pooled_v, _ = pool(batch.regions, batch.region_mask)
        states, pooled_s, _ = encoder(batch.token_ids, batch.lengths)
        return (pooled_v * probe_v).sum() + (pooled_s * probe_s).sum() + (states * probe_w).sum()

    params = [(f"pool.{n}", p) for n, p in pool.named_parameters()]
    params += [(f"sentence.{n}", p) for n, p in encoder.named_parameters()]
    return loss_fn, params, None


def _treeenc_probe(seed: int):
    torch.manual_seed(seed)
    from .treeenc import TreeEncoder

    encoder = TreeEncoder(16, 8, 5, 4, dtype=torch.float64)
    instance = torch.randn(3, 16, dtype=torch.float64)
    probe = torch.randn(3, 16, dtype=torch.float64)
    probe_f = torch.randn(3, 4, 5, dtype=torch.float64)
    probe_r = torch.randn(3, 3, 4, dtype=torch.float64)

    def loss_fn():
        states, embedding = encoder(instance)
        return (
            (embedding * probe).sum()
            + (states.fragment_probs * probe_f).sum()
            + (states.relation_probs * probe_r).sum()
        )

    return loss_fn, list(encoder.named_parameters()), None


def _objective_probe(seed: int):
    torch.manual_seed(seed)
    b, dim, ce, cr = 3, 16, 5, 4
    v_fused = torch.randn(b, dim, dtype=torch.float64, requires_grad=True)
    s_fused = torch.randn(b, dim, dtype=torch.float64, requires_grad=True)
    v_frag = torch.randn(b, 4, ce, dtype=torch.float64, requires_grad=True)
    v_rel = torch.randn(b, 3, cr, dtype=torch.float64, requires_grad=True)
    s_frag = torch.randn(b, 4, ce, dtype=torch.float64, requires_grad=True)
    s_rel = torch.randn(b, 3, cr, dtype=torch.float64, requires_grad=True)
    frag_targets = torch.randint(0, ce, (b, 4))
    rel_targets = torch.randint(0, cr, (b, 3))
    zeros = torch.zeros(b, 7, 8, dtype=torch.float64)

    def make_states(frag_logits, rel_logits):
        return TreeNodeStates(
            inputs=zeros,
            cell=zeros,
            hidden=zeros,
            fragment_probs=torch.softmax(frag_logits, dim=-1),
            relation_probs=torch.softmax(rel_logits, dim=-1),
        )

    def loss_fn():
        sim = similarity_matrix(v_fused, s_fused)
        total, _ = joint_loss(
            sim,
            make_states(v_frag, v_rel),
            make_states(s_frag, s_rel),
            frag_targets,
            rel_targets,
        )
        return total

    def kink_distance():
        with torch.no_grad():
            return _hinge_kink_distance(similarity_matrix(v_fused, s_fused), 0.2)

    params = [
        ("visual_fused", v_fused),
        ("textual_fused", s_fused),
        ("visual_fragment_logits", v_frag),
        ("visual_relation_logits", v_rel),
        ("textual_fragment_logits", s_frag),
        ("textual_relation_logits", s_rel),
    ]
    return loss_fn, params, kink_distance


def _end2end_probe(seed: int):
    config = _tiny_config(seed)
    batch, vocab, dicts = _tiny_batch(seed)
    torch.manual_seed(seed)
    model = SmfeaModel(config, vocab.size(), dicts.n_fragment, dicts.n_relation)
    model.eval()

    def loss_fn():
        total, _ = _loss_for_batch(model, batch)
        return total

    def kink_distance():
        with torch.no_grad():
            outputs = model(batch)
            sim = similarity_matrix(outputs.visual_fused, outputs.textual_fused)
            return _hinge_kink_distance(sim, config.margin)

    return loss_fn, list(model.named_parameters()), kink_distance


_PROBES = {
    "linear": _linear_probe,
    "encoders": _encoders_probe,
    "treeenc": _treeenc_probe,
    "objective": _objective_probe,
    "end2end": _end2end_probe,
}


def gradcheck(component: str, eps: float = 1e-5, seed: int = 0, max_resamples: int = 20) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    Uses double precision and tiny dimensions. Samples whose triplet hinge
    arguments fall within 1e-3 of a kink are rejected and redrawn, since the
    hinge is not differentiable there.
    """
    if component not in GRADCHECK_COMPONENTS:
        raise ConfigurationError(f"component must be one of {GRADCHECK_COMPONENTS}")
    started = time.perf_counter()
    resampled = 0
    for attempt in range(max_resamples):
        loss_fn, params, kink_distance = _PROBES[component](seed + attempt)
        if kink_distance is None or kink_distance() > KINK_TOL:
            break
        resampled += 1
    else:
        raise ConfigurationError(
            f"could not draw a kink-free sample in {max_resamples} attempts"
        )
    block_errors = _numeric_block_errors(loss_fn, params, eps)
    worst_block = max(block_errors, key=block_errors.get)
    return GradCheckReport(
        component=component,
        eps=eps,
        max_rel_error=block_errors[worst_block],
        worst_block=worst_block,
        block_errors=block_errors,
        resampled=resampled,
        elapsed_seconds=time.perf_counter() - started,
    )
