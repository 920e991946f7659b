"""Temperature-scaled similarities and the contrastive/supervised losses.

All contrastive losses share one form: -log(positive mass / total mass)
with mass = exp(<x_hat, y_hat> / tau). The production path never
materializes the exponentials; everything runs through max-shifted
log-sum-exp. `similarity` exposes the raw exponentiated value for tests
and small-scale oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, PlanError
from .sampling import FeatureRef, PairingPlan

# Maps a list of feature references to a [n, dim] matrix in order.
Resolver = Callable[[Sequence[FeatureRef]], torch.Tensor]


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.1
    normalize_inputs: bool = True

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class LossBundle:
    """Per-step loss components, all plain floats.

    `total` always satisfies
    total = source_ce
          + lambda_weight * (cross_modal_source + cross_modal_target
                             + cross_domain_appearance + cross_domain_motion
                             + self_training)
    where `self_training` is nonzero only in the hard pseudo-label
    baseline mode.
    """

    source_ce: float = 0.0
    cross_modal_source: float = 0.0
    cross_modal_target: float = 0.0
    cross_domain_appearance: float = 0.0
    cross_domain_motion: float = 0.0
    self_training: float = 0.0
    lambda_weight: float = 1.25
    total: float = field(default=0.0)

    CSV_FIELDS = (
        "source_ce",
        "cross_modal_source",
        "cross_modal_target",
        "cross_domain_appearance",
        "cross_domain_motion",
        "self_training",
        "total",
    )

    def expected_total(self) -> float:
        return self.source_ce + self.lambda_weight * (
            self.cross_modal_source
            + self.cross_modal_target
            + self.cross_domain_appearance
            + self.cross_domain_motion
            + self.self_training
        )

    def as_row(self, step: int) -> list:
        return [step] + [getattr(self, name) for name in self.CSV_FIELDS]


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + 1e-12)


def _pair_logits(
    anchor: torch.Tensor, others: torch.Tensor, cfg: SimilarityConfig
) -> torch.Tensor:
    """<anchor, row> / tau for every row, after optional normalization."""
    if anchor.shape[-1] != others.shape[-1]:
        raise ConfigError(
            f"dimension mismatch: anchor {anchor.shape[-1]} vs "
            f"candidates {others.shape[-1]}"
        )
    if cfg.normalize_inputs:
        anchor = _unit(anchor)
        others = _unit(others)
    return (others @ anchor) / cfg.temperature


def similarity(
    x: torch.Tensor, y: torch.Tensor, cfg: SimilarityConfig
) -> torch.Tensor:
    """exp(<x_hat, y_hat> / tau) as a scalar tensor.

    Bounded in [exp(-1/tau), exp(1/tau)] when inputs are normalized. Kept
    for tests and oracles; losses use the log-space path.
    """
    cfg.validate()
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape or x.dim() != 1:
        raise ConfigError("similarity expects two 1-D vectors of equal dimension")
    return torch.exp(_pair_logits(x, y.unsqueeze(0), cfg)[0])


def info_nce(
    anchor: torch.Tensor,
    positives: Sequence[torch.Tensor] | torch.Tensor,
    negatives: Sequence[torch.Tensor] | torch.Tensor,
    cfg: SimilarityConfig,
) -> torch.Tensor:
    """-log(sum_p phi(a,p) / (sum_p phi(a,p) + sum_n phi(a,n))).

    Positives appear in the denominator alongside negatives. Computed as
    logsumexp(all) - logsumexp(positives), so the value is strictly
    positive and safe at any temperature.
    """
    cfg.validate()
    if not torch.is_tensor(positives) and len(positives) == 0:
        raise PlanError("info_nce requires at least one positive")
    if not torch.is_tensor(negatives) and len(negatives) == 0:
        raise PlanError("info_nce requires at least one negative")
    pos = torch.stack(list(positives)) if not torch.is_tensor(positives) else positives
    neg = torch.stack(list(negatives)) if not torch.is_tensor(negatives) else negatives
    if pos.dim() != 2 or pos.shape[0] == 0:
        raise PlanError("info_nce requires at least one positive")
    if neg.dim() != 2 or neg.shape[0] == 0:
        raise PlanError("info_nce requires at least one negative")
    pos_logits = _pair_logits(anchor, pos, cfg)
    neg_logits = _pair_logits(anchor, neg, cfg)
    all_logits = torch.cat([pos_logits, neg_logits])
    return torch.logsumexp(all_logits, dim=0) - torch.logsumexp(pos_logits, dim=0)


def plan_loss(
    plan: PairingPlan,
    resolve: Resolver,
    cfg: SimilarityConfig,
    *,
    pooled_log: bool = False,
) -> torch.Tensor:
    """Contrastive loss over a pairing plan; zero for an empty plan.

    Default: per-anchor ratio, averaged over anchors. With `pooled_log`
    the positive and denominator masses are pooled across all anchors
    before the single log (the summed-inside-log variant).
    """
    cfg.validate()
    if len(plan) == 0:
        return torch.zeros(())
    per_anchor = []
    pooled_pos = []
    pooled_all = []
    for entry in plan.entries:
        anchor = resolve([entry.anchor])[0]
        pos = resolve(entry.positives)
        neg = resolve(entry.negatives)
        if pooled_log:
            pos_logits = _pair_logits(anchor, pos, cfg)
            neg_logits = _pair_logits(anchor, neg, cfg)
            pooled_pos.append(pos_logits)
            pooled_all.append(torch.cat([pos_logits, neg_logits]))
        else:
            per_anchor.append(info_nce(anchor, pos, neg, cfg))
    if pooled_log:
        all_logits = torch.cat(pooled_all)
        pos_logits = torch.cat(pooled_pos)
        return torch.logsumexp(all_logits, dim=0) - torch.logsumexp(pos_logits, dim=0)
    return torch.stack(per_anchor).mean()


def make_table_resolver(
    tables: dict[tuple[str, str, str], torch.Tensor],
    row_index: dict[tuple[str, str, str], dict[str, int]],
) -> Resolver:
    """Resolver over dense feature tables keyed (origin, domain, modality).

    Preserves autograd through the gathered rows; the trainer points the
    batch tables at live activations and the bank tables at constants.
    """

    def resolve(refs: Sequence[FeatureRef]) -> torch.Tensor:
        groups: dict[tuple[str, str, str], list[int]] = {}
        for i, ref in enumerate(refs):
            groups.setdefault((ref.origin, ref.domain, ref.modality), []).append(i)
        subs = []
        positions_all: list[int] = []
        for key, positions in groups.items():
            try:
                table = tables[key]
                index = row_index[key]
                rows = torch.as_tensor(
                    [index[refs[i].clip_id] for i in positions], dtype=torch.long
                )
            except KeyError as exc:
                raise PlanError(f"plan references missing feature {exc}") from None
            subs.append(table.index_select(0, rows))
            positions_all.extend(positions)
        stacked = torch.cat(subs, dim=0)
        if len(groups) == 1:
            return stacked
        order = torch.empty(len(refs), dtype=torch.long)
        order[torch.as_tensor(positions_all, dtype=torch.long)] = torch.arange(
            len(refs), dtype=torch.long
        )
        return stacked.index_select(0, order)

    return resolve


def cross_modal_loss(
    plan: PairingPlan,
    resolve_projected: Resolver,
    cfg: SimilarityConfig,
    *,
    pooled_log: bool = False,
) -> torch.Tensor:
    """Within-domain view-pairing loss on projection-head outputs."""
    if plan.kind != "cross_modal":
        raise PlanError(f"expected a cross_modal plan, got {plan.kind!r}")
    return plan_loss(plan, resolve_projected, cfg, pooled_log=pooled_log)


def cross_domain_loss(
    plan: PairingPlan,
    resolve_raw: Resolver,
    cfg: SimilarityConfig,
    *,
    pooled_log: bool = False,
) -> torch.Tensor:
    """Pseudo-label-gated alignment loss on raw encoder features.

    The projection head never touches this path; reinitializing it must
    leave the value bit-identical.
    """
    if plan.kind != "cross_domain":
        raise PlanError(f"expected a cross_domain plan, got {plan.kind!r}")
    return plan_loss(plan, resolve_raw, cfg, pooled_log=pooled_log)


def supervised_loss(
    logits_appearance: torch.Tensor,
    logits_motion: torch.Tensor,
    labels: torch.Tensor,
    *,
    per_stream: bool = True,
) -> torch.Tensor:
    """Cross-entropy on labeled clips.

    Default trains each stream's classifier on its own logits (summed);
    the alternative applies one CE to the fused logits.
    """
    if per_stream:
        return F.cross_entropy(logits_appearance, labels) + F.cross_entropy(
            logits_motion, labels
        )
    fused = 0.5 * (logits_appearance + logits_motion)
    return F.cross_entropy(fused, labels)


def total_loss(
    *,
    source_ce: torch.Tensor,
    cross_modal_source: torch.Tensor,
    cross_modal_target: torch.Tensor,
    cross_domain_appearance: torch.Tensor,
    cross_domain_motion: torch.Tensor,
    self_training: torch.Tensor | None = None,
    lambda_weight: float = 1.25,
) -> tuple[torch.Tensor, LossBundle]:
    """Weighted objective plus its logged float bundle.

    The bundle's `total` is recomputed from the logged component floats so
    the composition identity holds exactly on the logged values.
    """
    if lambda_weight < 0:
        raise ConfigError("lambda_weight must be >= 0")
    zero = torch.zeros(())
    st = self_training if self_training is not None else zero
    tensor_total = source_ce + lambda_weight * (
        cross_modal_source
        + cross_modal_target
        + cross_domain_appearance
        + cross_domain_motion
        + st
    )
    bundle = LossBundle(
        source_ce=float(source_ce),
        cross_modal_source=float(cross_modal_source),
        cross_modal_target=float(cross_modal_target),
        cross_domain_appearance=float(cross_domain_appearance),
        cross_domain_motion=float(cross_domain_motion),
        self_training=float(st),
        lambda_weight=float(lambda_weight),
    )
    bundle.total = bundle.expected_total()
    return tensor_total, bundle
