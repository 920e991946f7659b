"""Two-stream adaptation trainer: batch assembly, objective, SGD, banks.

Each step draws a batch per domain, samples per-modality windows, encodes
the four feature groups, scores every enabled loss against bank contents
from the previous step, takes one SGD step, and only then refreshes the
banks with this step's features. Randomness is split into independent
named streams so ablation variants consume identical window draws.
"""

from __future__ import annotations

import bisect
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import MODALITIES, Corpus
from .errors import ConfigError, DataFormatError, NumericError
from .evaluate import EvalReport, evaluate_pair
from .losses import (
    LossBundle,
    SimilarityConfig,
    cross_domain_loss,
    cross_modal_loss,
    make_table_resolver,
    supervised_loss,
    total_loss,
)
from .membank import MemoryBankSet, init_banks
from .model import ModelConfig, TwoStreamModel, build_model, fuse_logits
from .pseudolabel import (
    PseudoLabelRecord,
    accepted_records,
    inject_label_noise,
    predict_pseudo_labels,
    records_from_logits,
    self_training_loss,
)
from .sampling import (
    BANK,
    BATCH,
    build_cross_domain_plan,
    build_cross_modal_plan,
    extract_window,
    sample_window_pair,
    windows_to_tensor,
)

CHECKPOINT_SCHEMA = 1
RNG_STREAMS = ("windows", "plans", "banks", "noise", "shuffle")


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters; JSON-mirrored by the config layer."""

    tau: float = 0.1
    delta: float = 0.5
    lambda_weight: float = 1.25
    confidence_threshold: float = 0.8
    window_length: int = 16
    batch_per_domain: int = 16
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_milestones: tuple[int, ...] = (1000,)
    total_steps: int = 2000
    warmup_fraction: float = 0.1
    enable_cross_modal: bool = True
    enable_cross_domain: bool = True
    self_training_baseline: bool = False
    pooled_contrastive_log: bool = False
    per_stream_ce: bool = True
    negatives_mode: str = "both"
    bank_negatives: int = 64
    cross_domain_positives: int = 4
    cross_domain_negatives: int = 64
    bank_init: str = "random"
    sgd_momentum: float = 0.0
    pseudo_label_noise: float = 0.0
    pseudo_refresh: str = "step"
    eval_every: int = 0
    seeds: tuple[int, ...] = (0,)
    deterministic: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be >= 0")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in (0, 1]")
        if self.window_length <= 0 or self.batch_per_domain <= 0:
            raise ConfigError("window_length and batch_per_domain must be positive")
        if self.base_lr <= 0 or self.total_steps < 0:
            raise ConfigError("base_lr must be positive, total_steps >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.negatives_mode not in ("both", "batch", "bank"):
            raise ConfigError(f"unknown negatives_mode {self.negatives_mode!r}")
        if self.pseudo_refresh not in ("step", "epoch"):
            raise ConfigError(f"unknown pseudo_refresh {self.pseudo_refresh!r}")
        if self.bank_init not in ("random", "zeros"):
            raise ConfigError(f"unknown bank_init {self.bank_init!r}")
        if not 0.0 <= self.pseudo_label_noise < 1.0:
            raise ConfigError("pseudo_label_noise must lie in [0, 1)")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["lr_milestones"] = list(self.lr_milestones)
        raw["seeds"] = list(self.seeds)
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "lr_milestones" in raw:
            raw["lr_milestones"] = tuple(raw["lr_milestones"])
        if "seeds" in raw:
            raw["seeds"] = tuple(raw["seeds"])
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """base_lr * decay^(milestones passed); milestone m counts once step >= m."""
    passed = bisect.bisect_right(sorted(cfg.lr_milestones), step)
    return cfg.base_lr * (cfg.lr_decay_factor ** passed)


@dataclass
class TrainState:
    step: int
    model: TwoStreamModel
    optimizer: torch.optim.Optimizer
    banks: MemoryBankSet
    rngs: dict[str, np.random.Generator]
    loss_history: list[LossBundle] = field(default_factory=list)
    eval_history: list[EvalReport] = field(default_factory=list)
    last_step_debug: dict = field(default_factory=dict)


class Trainer:
    def __init__(
        self,
        corpus_source: Corpus,
        corpus_target: Corpus,
        model_config: ModelConfig,
        config: TrainConfig,
        *,
        seed: int | None = None,
        out_dir: str | Path | None = None,
    ):
        config.validate()
        model_config.validate()
        if model_config.window_length != config.window_length:
            raise ConfigError("model and trainer window_length disagree")
        if corpus_source.domains() - {"source"}:
            raise ConfigError("source corpus contains non-source clips")
        if corpus_target.domains() - {"target"}:
            raise ConfigError("target corpus contains non-target clips")
        corpus_source.check_min_length(config.window_length)
        corpus_target.check_min_length(config.window_length)
        if config.batch_per_domain > min(len(corpus_source), len(corpus_target)):
            raise ConfigError("batch_per_domain exceeds a corpus size")
        for clip in corpus_source:
            if clip.label is None:
                raise DataFormatError(f"source clip {clip.clip_id} has no label")

        self.corpus_source = corpus_source
        self.corpus_target = corpus_target
        self.config = config
        self.model_config = model_config
        self.seed = config.seeds[0] if seed is None else seed
        self.out_dir = Path(out_dir) if out_dir else None
        if config.deterministic:
            torch.set_num_threads(1)

        rngs = {
            name: np.random.default_rng([self.seed, i])
            for i, name in enumerate(RNG_STREAMS)
        }
        model = build_model(model_config, seed=self.seed)
        optimizer = torch.optim.SGD(
            model.parameters(), lr=config.base_lr, momentum=config.sgd_momentum
        )
        banks = init_banks(
            corpus_source,
            corpus_target,
            raw_dim=model_config.feature_dim,
            projected_dim=model_config.projection_dim,
            rng=rngs["banks"],
            delta=config.delta,
            init=config.bank_init,
        )
        self.state = TrainState(
            step=0, model=model, optimizer=optimizer, banks=banks, rngs=rngs
        )
        self._source_class_index = corpus_source.class_index()
        self._num_classes = model_config.num_classes
        self._pools: dict[str, list[str]] = {"source": [], "target": []}
        self._pool_pos = {"source": 0, "target": 0}
        self._epoch_cache: dict[str, PseudoLabelRecord] = {}
        self._epoch_cache_step = -1

    # -- batching ---------------------------------------------------------

    def _corpus(self, domain: str) -> Corpus:
        return self.corpus_source if domain == "source" else self.corpus_target

    def _next_batch(self, domain: str) -> list[str]:
        pool = self._pools[domain]
        pos = self._pool_pos[domain]
        batch = self.config.batch_per_domain
        if pos + batch > len(pool):
            ids = self._corpus(domain).ids()
            order = self.state.rngs["shuffle"].permutation(len(ids))
            self._pools[domain] = [ids[i] for i in order]
            self._pool_pos[domain] = 0
            pool, pos = self._pools[domain], 0
            if domain == "target":
                self._epoch_cache_step = -1  # force pseudo-label refresh
        self._pool_pos[domain] = pos + batch
        return pool[pos : pos + batch]

    def _sample_batch(self, domain: str, clip_ids: Sequence[str]):
        corpus = self._corpus(domain)
        rng = self.state.rngs["windows"]
        pairs = [
            sample_window_pair(corpus.get(cid), self.config.window_length, rng)
            for cid in clip_ids
        ]
        tensors = {}
        for modality in MODALITIES:
            windows = [
                extract_window(corpus.get(p.clip_id), p, modality) for p in pairs
            ]
            tensors[modality] = windows_to_tensor(windows)
        return pairs, tensors

    # -- pseudo-labels ----------------------------------------------------

    def _pseudo_records(
        self,
        target_ids: Sequence[str],
        f_target: dict[str, torch.Tensor],
    ) -> list[PseudoLabelRecord]:
        cfg = self.config
        step = self.state.step
        if cfg.pseudo_refresh == "epoch":
            if self._epoch_cache_step < 0:
                records = predict_pseudo_labels(
                    self.state.model,
                    list(self.corpus_target),
                    cfg.confidence_threshold,
                    step=step,
                )
                self._epoch_cache = {r.clip_id: r for r in records}
                self._epoch_cache_step = step
            records = [self._epoch_cache[cid] for cid in target_ids]
        else:
            with torch.no_grad():
                fused = fuse_logits(
                    self.state.model.stream_logits(
                        f_target["appearance"].detach(), "appearance"
                    ),
                    self.state.model.stream_logits(
                        f_target["motion"].detach(), "motion"
                    ),
                )
            records = records_from_logits(
                fused, list(target_ids), cfg.confidence_threshold, step=step
            )
        if cfg.pseudo_label_noise > 0:
            records = inject_label_noise(
                records,
                cfg.pseudo_label_noise,
                self._num_classes,
                self.state.rngs["noise"],
            )
        return records

    # -- one optimization step ---------------------------------------------

    def train_step(
        self,
        source_ids: Sequence[str] | None = None,
        target_ids: Sequence[str] | None = None,
    ) -> LossBundle:
        cfg = self.config
        state = self.state
        model = state.model
        model.train()

        lr = learning_rate(cfg, state.step)
        for group in state.optimizer.param_groups:
            group["lr"] = lr

        source_ids = list(source_ids) if source_ids else self._next_batch("source")
        target_ids = list(target_ids) if target_ids else self._next_batch("target")
        src_pairs, src_windows = self._sample_batch("source", source_ids)
        tgt_pairs, tgt_windows = self._sample_batch("target", target_ids)

        features: dict[tuple[str, str], torch.Tensor] = {}
        projected: dict[tuple[str, str], torch.Tensor] = {}
        for domain, ids, windows in (
            ("source", source_ids, src_windows),
            ("target", target_ids, tgt_windows),
        ):
            for modality in MODALITIES:
                f = model.encode(windows[modality], modality, ids)
                features[(domain, modality)] = f
                projected[(domain, modality)] = model.project(f)

        labels = torch.as_tensor(
            [self.corpus_source.get(cid).label for cid in source_ids],
            dtype=torch.long,
        )
        l_src = supervised_loss(
            model.stream_logits(features[("source", "appearance")], "appearance"),
            model.stream_logits(features[("source", "motion")], "motion"),
            labels,
            per_stream=cfg.per_stream_ce,
        )

        records: list[PseudoLabelRecord] = []
        accepted: list[PseudoLabelRecord] = []
        if cfg.enable_cross_domain or cfg.self_training_baseline:
            records = self._pseudo_records(
                target_ids,
                {
                    "appearance": features[("target", "appearance")],
                    "motion": features[("target", "motion")],
                },
            )
            if state.step >= cfg.warmup_steps:
                accepted = accepted_records(records)

        sim_cfg = SimilarityConfig(temperature=cfg.tau, normalize_inputs=True)
        zero = torch.zeros(())
        plans: dict[str, object] = {}
        l_cm_s = l_cm_t = l_cd_a = l_cd_m = l_st = zero

        batch_index = {
            "source": {cid: i for i, cid in enumerate(source_ids)},
            "target": {cid: i for i, cid in enumerate(target_ids)},
        }

        def resolver(space: str):
            table = projected if space == "projected" else features
            tables = {}
            rows = {}
            for domain in ("source", "target"):
                for modality in MODALITIES:
                    tables[(BATCH, domain, modality)] = table[(domain, modality)]
                    rows[(BATCH, domain, modality)] = batch_index[domain]
                    bank_tensor, bank_rows = state.banks.table(
                        domain, modality, space
                    )
                    tables[(BANK, domain, modality)] = bank_tensor
                    rows[(BANK, domain, modality)] = bank_rows
            return make_table_resolver(tables, rows)

        if cfg.enable_cross_modal:
            resolve_projected = resolver("projected")
            for domain, ids in (("source", source_ids), ("target", target_ids)):
                plan = build_cross_modal_plan(
                    ids,
                    domain,
                    bank_ids=state.banks.ids(domain, "appearance"),
                    bank_negatives=cfg.bank_negatives,
                    negatives_mode=cfg.negatives_mode,
                    rng=state.rngs["plans"],
                )
                plans[f"cross_modal_{domain}"] = plan
                value = cross_modal_loss(
                    plan,
                    resolve_projected,
                    sim_cfg,
                    pooled_log=cfg.pooled_contrastive_log,
                )
                if domain == "source":
                    l_cm_s = value
                else:
                    l_cm_t = value

        if cfg.enable_cross_domain and accepted:
            resolve_raw = resolver("raw")
            for modality in MODALITIES:
                plan = build_cross_domain_plan(
                    accepted,
                    self._source_class_index,
                    modality,
                    positives_per_anchor=cfg.cross_domain_positives,
                    negatives_per_anchor=cfg.cross_domain_negatives,
                    rng=state.rngs["plans"],
                )
                plans[f"cross_domain_{modality}"] = plan
                value = cross_domain_loss(
                    plan, resolve_raw, sim_cfg, pooled_log=cfg.pooled_contrastive_log
                )
                if modality == "appearance":
                    l_cd_a = value
                else:
                    l_cd_m = value

        if cfg.self_training_baseline and accepted:
            l_st = self_training_loss(
                model.stream_logits(features[("target", "appearance")], "appearance"),
                model.stream_logits(features[("target", "motion")], "motion"),
                target_ids,
                accepted,
                per_stream=cfg.per_stream_ce,
            )

        tensor_total, bundle = total_loss(
            source_ce=l_src,
            cross_modal_source=l_cm_s,
            cross_modal_target=l_cm_t,
            cross_domain_appearance=l_cd_a,
            cross_domain_motion=l_cd_m,
            self_training=l_st,
            lambda_weight=cfg.lambda_weight,
        )
        if not torch.isfinite(tensor_total):
            self._dump_diagnostics(bundle, source_ids, target_ids)
            raise NumericError(
                f"non-finite total loss at step {state.step}: {bundle}"
            )

        state.optimizer.zero_grad()
        tensor_total.backward()
        state.optimizer.step()

        with torch.no_grad():
            for key, value in features.items():
                state.banks.update(key[0], key[1],
                                   batch_ids_for(key[0], source_ids, target_ids),
                                   value.detach(), "raw")
            for key, value in projected.items():
                state.banks.update(key[0], key[1],
                                   batch_ids_for(key[0], source_ids, target_ids),
                                   value.detach(), "projected")

        state.last_step_debug = {
            "features": {k: v.detach().clone() for k, v in features.items()},
            "projected": {k: v.detach().clone() for k, v in projected.items()},
            "plans": plans,
            "records": records,
            "accepted": accepted,
            "source_ids": source_ids,
            "target_ids": target_ids,
            "window_pairs": {"source": src_pairs, "target": tgt_pairs},
            "lr": lr,
        }
        state.step += 1
        state.loss_history.append(bundle)
        return bundle

    def _dump_diagnostics(self, bundle: LossBundle, source_ids, target_ids) -> None:
        if not self.out_dir:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "step": self.state.step,
            "bundle": asdict(bundle),
            "source_ids": list(source_ids),
            "target_ids": list(target_ids),
        }
        (self.out_dir / "diagnostic_dump.json").write_text(
            json.dumps(payload, indent=2)
        )

    # -- evaluation & the full loop ----------------------------------------

    def evaluate_now(self) -> EvalReport:
        return evaluate_pair(
            self.state.model,
            self.corpus_source,
            self.corpus_target,
            step=self.state.step,
        )

    def run(self) -> list[EvalReport]:
        cfg = self.config
        eval_every = cfg.eval_every or max(1, cfg.total_steps // 8)
        with self.corpus_target.labels_locked():
            while self.state.step < cfg.total_steps:
                self.train_step()
                if (
                    self.state.step % eval_every == 0
                    or self.state.step == cfg.total_steps
                ):
                    with self.corpus_target.eval_access():
                        self.state.eval_history.append(self.evaluate_now())
        if self.out_dir:
            self.write_artifacts()
        return self.state.eval_history

    def final_target_accuracy(self) -> float:
        """Mean target top-1 over the last (up to) 3 evaluation points."""
        history = self.state.eval_history
        if not history:
            with self.corpus_target.eval_access():
                history = [self.evaluate_now()]
        tail = history[-3:]
        return float(np.mean([r.top1_target for r in tail]))

    def write_artifacts(self) -> None:
        out = self.out_dir
        assert out is not None
        out.mkdir(parents=True, exist_ok=True)
        with (out / "losses.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + list(LossBundle.CSV_FIELDS))
            for i, bundle in enumerate(self.state.loss_history):
                writer.writerow(bundle.as_row(i))
        metrics = [r.to_dict() for r in self.state.eval_history]
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        self.save_checkpoint(out / "checkpoint.pt")

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = self.state
        payload = {
            "schema_version": CHECKPOINT_SCHEMA,
            "step": state.step,
            "model": state.model.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "banks": state.banks.state_dict(),
            "rng_states": {
                name: rng.bit_generator.state for name, rng in state.rngs.items()
            },
            "train_config": self.config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "pools": {
                "source": self._pools["source"],
                "target": self._pools["target"],
                "source_pos": self._pool_pos["source"],
                "target_pos": self._pool_pos["target"],
            },
            "loss_history": [asdict(b) for b in state.loss_history],
            "eval_history": [r.to_dict() for r in state.eval_history],
            "epoch_cache": {
                cid: r.to_dict() for cid, r in self._epoch_cache.items()
            },
            "epoch_cache_step": self._epoch_cache_step,
            "zero_norm_events": state.model.projection_head.zero_norm_events,
        }
        torch.save(payload, path)
        return path

    @classmethod
    def load_checkpoint(
        cls,
        path: str | Path,
        corpus_source: Corpus,
        corpus_target: Corpus,
        *,
        out_dir: str | Path | None = None,
    ) -> "Trainer":
        payload = torch.load(path, weights_only=False)
        if payload.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ConfigError("unsupported checkpoint schema")
        config = TrainConfig.from_dict(payload["train_config"])
        model_config = ModelConfig(**payload["model_config"])
        trainer = cls(
            corpus_source, corpus_target, model_config, config, out_dir=out_dir
        )
        state = trainer.state
        state.model.load_state_dict(payload["model"])
        state.optimizer.load_state_dict(payload["optimizer"])
        state.banks.load_state_dict(payload["banks"])
        for name, rng_state in payload["rng_states"].items():
            state.rngs[name].bit_generator.state = rng_state
        state.step = payload["step"]
        state.loss_history = [LossBundle(**b) for b in payload["loss_history"]]
        state.eval_history = [EvalReport.from_dict(r) for r in payload["eval_history"]]
        trainer._pools["source"] = list(payload["pools"]["source"])
        trainer._pools["target"] = list(payload["pools"]["target"])
        trainer._pool_pos["source"] = payload["pools"]["source_pos"]
        trainer._pool_pos["target"] = payload["pools"]["target_pos"]
        trainer._epoch_cache = {
            cid: PseudoLabelRecord(**r) for cid, r in payload["epoch_cache"].items()
        }
        trainer._epoch_cache_step = payload["epoch_cache_step"]
        state.model.projection_head.zero_norm_events = payload["zero_norm_events"]
        return trainer


def batch_ids_for(domain: str, source_ids: list[str], target_ids: list[str]):
    return source_ids if domain == "source" else target_ids


def run_training(
    corpus_source: Corpus,
    corpus_target: Corpus,
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Trainer, list[EvalReport]]:
    """Train end-to-end and return the trainer plus its evaluation history."""
    trainer = Trainer(
        corpus_source,
        corpus_target,
        model_config,
        config,
        seed=seed,
        out_dir=out_dir,
    )
    history = trainer.run()
    return trainer, history
