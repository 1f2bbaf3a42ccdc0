"""Evaluation harness: per-instance consistency, cross-instance score studies,
the instance relationship matrix, and the end-to-end impersonation experiment.

A Corpus holds, for each matcher instance, the embeddings of one shared
(identity, image) grid, rows ordered identically across instances so pair
index lists transfer between instances.  The pair protocol is:

* genuine - every within-identity image pair (unordered),
* impostor - a seeded uniform subsample of cross-identity pairs, capped at
  10^6 (enough to resolve FMR 1e-4),
* cross-genuine - every ordered within-identity pair (a != b); using both
  orders makes cross-instance cells symmetric by construction since cosine
  commutes.

All reports carry the corpus seed and config digest; none carry wall-clock
values, so rerunning identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .embedding import EmbeddingRecord, read_records
from .errors import RevBioError, UnknownInstanceError
from .lifecycle import RevocableSystem
from .metrics import (
    DPrimeValue,
    FoldAccuracy,
    InsufficientImpostorsError,
    ThresholdSpec,
    d_prime,
    fmr_threshold,
    verification_accuracy,
)
from .registry import Registry
from .simulate import CaptureDescriptor, SimWorldConfig, SyntheticExtractor, stream_rng

__all__ = [
    "ConsistencyReport",
    "Corpus",
    "CrossCell",
    "CrossDistribution",
    "InsufficientInstancesError",
    "PairProtocol",
    "RelationshipMatrix",
    "Scenario",
    "ScenarioEvent",
    "ScenarioReferencesUnknownIdentityError",
    "ScenarioReport",
    "build_scenario",
    "consistency_report",
    "cross_model_distributions",
    "impersonation_experiment",
    "relationship_matrix",
    "run_scenario",
]

IMPOSTOR_PAIR_CAP = 1_000_000
SCENARIO_PRESETS = ("steal-revoke-replay", "steal-no-revoke", "revoke-no-steal")


class InsufficientInstancesError(RevBioError):
    """The evaluation needs at least two instances."""


class ScenarioReferencesUnknownIdentityError(RevBioError):
    """A scenario event points at an identity the system never enrolled."""


# --------------------------------------------------------------------------
# Corpus and pair protocol


@dataclass(frozen=True)
class PairProtocol:
    """Row-index pair lists shared by every instance of a corpus."""

    genuine_a: np.ndarray
    genuine_b: np.ndarray
    impostor_a: np.ndarray
    impostor_b: np.ndarray
    cross_a: np.ndarray
    cross_b: np.ndarray
    impostor_total: int  # before capping
    seed: int

    @property
    def impostor_count(self) -> int:
        return int(self.impostor_a.size)


class Corpus:
    """Embeddings of one (identity, image) grid under every instance."""

    def __init__(
        self,
        matrices: Mapping[str, np.ndarray],
        row_identity: np.ndarray,
        identity_names: Sequence[str],
        seed: int = 0,
        config: Optional[SimWorldConfig] = None,
        config_digest: Optional[str] = None,
        identity_groups: Optional[Sequence[Optional[str]]] = None,
    ):
        if not matrices:
            raise ValueError("corpus has no instances")
        self.instance_ids = tuple(matrices)
        self._matrices = dict(matrices)
        shapes = {m.shape for m in self._matrices.values()}
        if len(shapes) != 1:
            raise ValueError(f"instances disagree on matrix shape: {sorted(shapes)}")
        self.row_identity = np.asarray(row_identity, dtype=np.int64)
        if self.row_identity.size != next(iter(shapes))[0]:
            raise ValueError("row_identity length != matrix row count")
        self.identity_names = tuple(identity_names)
        self.seed = int(seed)
        self.config = config
        self.config_digest = config_digest
        self.identity_groups = (
            tuple(identity_groups) if identity_groups is not None else None
        )
        self._protocols: dict[int, PairProtocol] = {}

    @property
    def dimension(self) -> int:
        return int(next(iter(self._matrices.values())).shape[1])

    @property
    def num_rows(self) -> int:
        return int(self.row_identity.size)

    def matrix(self, instance: str) -> np.ndarray:
        try:
            return self._matrices[instance]
        except KeyError:
            raise UnknownInstanceError(f"instance {instance!r} not in corpus") from None

    @classmethod
    def from_config(cls, config: SimWorldConfig) -> "Corpus":
        extractor = SyntheticExtractor(config)
        matrices = {
            iid: extractor.embedding_matrix(iid) for iid in extractor.instances()
        }
        n_id, n_img = config.num_identities, config.images_per_identity
        return cls(
            matrices=matrices,
            row_identity=np.repeat(np.arange(n_id, dtype=np.int64), n_img),
            identity_names=[config.identity_label(i) for i in range(n_id)],
            seed=config.master_seed,
            config=config,
            config_digest=config.digest(),
            identity_groups=[config.group_of(i) for i in range(n_id)]
            if config.group_noise_multipliers
            else None,
        )

    @classmethod
    def from_records(
        cls,
        records: Union[str, Path, Iterable[EmbeddingRecord]],
        config: Optional[SimWorldConfig] = None,
        seed: Optional[int] = None,
    ) -> "Corpus":
        """Build from an embedding record stream (or JSONL path).

        Every instance must cover the same (identity, image) set.  Rows are
        sorted by (identity, image) label.  If ``config`` is given, the group
        assignment and pair seed come from it.
        """
        if isinstance(records, (str, Path)):
            records = read_records(records)
        per_instance: dict[str, dict[tuple[str, str], np.ndarray]] = {}
        for rec in records:
            per_instance.setdefault(rec.instance, {})[(rec.identity, rec.image)] = rec.vector
        if not per_instance:
            raise ValueError("no records supplied")
        keysets = {iid: frozenset(v) for iid, v in per_instance.items()}
        reference = next(iter(keysets.values()))
        for iid, keys in keysets.items():
            if keys != reference:
                raise ValueError(f"instance {iid!r} covers a different (identity, image) set")
        rows = sorted(reference)
        identity_names = sorted({identity for identity, _ in rows})
        ordinal = {name: i for i, name in enumerate(identity_names)}
        row_identity = np.asarray([ordinal[identity] for identity, _ in rows], dtype=np.int64)
        matrices = {
            iid: np.vstack([per_instance[iid][key] for key in rows])
            for iid in per_instance
        }
        groups = None
        if config is not None and config.group_noise_multipliers:
            groups = [config.group_of(i) for i in range(len(identity_names))]
        if seed is None:
            seed = config.master_seed if config is not None else 0
        return cls(
            matrices=matrices,
            row_identity=row_identity,
            identity_names=identity_names,
            seed=seed,
            config=config,
            config_digest=config.digest() if config is not None else None,
            identity_groups=groups,
        )

    def pair_protocol(self, impostor_cap: int = IMPOSTOR_PAIR_CAP) -> PairProtocol:
        cached = self._protocols.get(impostor_cap)
        if cached is None:
            cached = _build_pairs(self.row_identity, self.seed, impostor_cap)
            self._protocols[impostor_cap] = cached
        return cached

    # -- scoring -------------------------------------------------------------

    def pair_scores(
        self,
        first_instance: str,
        second_instance: str,
        a_idx: np.ndarray,
        b_idx: np.ndarray,
    ) -> np.ndarray:
        """Cosines of (row a under first instance, row b under second)."""
        first = self.matrix(first_instance).astype(np.float64)
        second = (
            first
            if second_instance == first_instance
            else self.matrix(second_instance).astype(np.float64)
        )
        return _gathered_dots(first, second, a_idx, b_idx)

    def same_model_scores(
        self, instance: str, protocol: Optional[PairProtocol] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """(genuine, impostor) score arrays for one instance."""
        p = protocol or self.pair_protocol()
        e = self.matrix(instance).astype(np.float64)
        genuine = _gathered_dots(e, e, p.genuine_a, p.genuine_b)
        impostor = _gathered_dots(e, e, p.impostor_a, p.impostor_b)
        return genuine, impostor


def _build_pairs(row_identity: np.ndarray, seed: int, impostor_cap: int) -> PairProtocol:
    if impostor_cap < 1:
        raise ValueError("impostor_cap must be positive")
    n = row_identity.size
    a, b = np.triu_indices(n, k=1)
    same = row_identity[a] == row_identity[b]
    genuine_a, genuine_b = a[same], b[same]
    impostor_a, impostor_b = a[~same], b[~same]
    total = int(impostor_a.size)
    if total > impostor_cap:
        rng = stream_rng(seed, "pairs")
        keep = rng.choice(total, size=impostor_cap, replace=False)
        keep.sort()
        impostor_a, impostor_b = impostor_a[keep], impostor_b[keep]
    return PairProtocol(
        genuine_a=genuine_a,
        genuine_b=genuine_b,
        impostor_a=impostor_a,
        impostor_b=impostor_b,
        cross_a=np.concatenate([genuine_a, genuine_b]),
        cross_b=np.concatenate([genuine_b, genuine_a]),
        impostor_total=total,
        seed=int(seed),
    )


def _gathered_dots(
    first: np.ndarray,
    second: np.ndarray,
    a_idx: np.ndarray,
    b_idx: np.ndarray,
    chunk: int = 32768,
) -> np.ndarray:
    """Row-pair dot products without materializing a full Gram matrix."""
    out = np.empty(a_idx.size, dtype=np.float64)
    for start in range(0, a_idx.size, chunk):
        end = min(start + chunk, a_idx.size)
        out[start:end] = np.einsum(
            "ij,ij->i", first[a_idx[start:end]], second[b_idx[start:end]]
        )
    return np.clip(out, -1.0, 1.0)


# --------------------------------------------------------------------------
# Consistency report (per-instance accuracy and d-prime, with aggregates)


@dataclass(frozen=True)
class InstanceConsistency:
    instance_id: str
    accuracy: FoldAccuracy
    d_prime: DPrimeValue
    group_d_prime: dict[str, DPrimeValue] = field(default_factory=dict)


@dataclass(frozen=True)
class ConsistencyReport:
    per_instance: tuple[InstanceConsistency, ...]
    accuracy_mean: float
    accuracy_std: float
    d_prime_mean: float
    d_prime_std: float
    group_summary: dict[str, tuple[float, float]]  # label -> (mean, std) of d'
    seed: int
    config_digest: Optional[str]

    def as_dict(self) -> dict:
        return {
            "per_instance": [
                {
                    "instance": item.instance_id,
                    "accuracy_mean": item.accuracy.mean,
                    "accuracy_per_fold": list(item.accuracy.per_fold),
                    "d_prime": item.d_prime.as_dict(),
                    "group_d_prime": {
                        label: value.as_dict()
                        for label, value in sorted(item.group_d_prime.items())
                    },
                }
                for item in self.per_instance
            ],
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "d_prime_mean": self.d_prime_mean,
            "d_prime_std": self.d_prime_std,
            "group_summary": {
                label: {"d_prime_mean": m, "d_prime_std": s}
                for label, (m, s) in sorted(self.group_summary.items())
            },
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["instance,metric,value"]
        for item in self.per_instance:
            lines.append(f"{item.instance_id},accuracy_mean,{item.accuracy.mean!r}")
            lines.append(f"{item.instance_id},d_prime,{item.d_prime.value!r}")
            for label, value in sorted(item.group_d_prime.items()):
                lines.append(f"{item.instance_id},d_prime[{label}],{value.value!r}")
        lines.append(f"ALL,accuracy_mean,{self.accuracy_mean!r}")
        lines.append(f"ALL,accuracy_std,{self.accuracy_std!r}")
        lines.append(f"ALL,d_prime_mean,{self.d_prime_mean!r}")
        lines.append(f"ALL,d_prime_std,{self.d_prime_std!r}")
        for label, (m, s) in sorted(self.group_summary.items()):
            lines.append(f"ALL,d_prime_mean[{label}],{m!r}")
            lines.append(f"ALL,d_prime_std[{label}],{s!r}")
        return "\n".join(lines) + "\n"


def consistency_report(
    corpus: Corpus, protocol: Optional[PairProtocol] = None, folds: int = 10
) -> ConsistencyReport:
    """Per-instance accuracy and d-prime with across-instance mean and
    (unbiased) standard deviation; per-group d-prime when groups are set."""
    if len(corpus.instance_ids) < 2:
        raise InsufficientInstancesError("consistency report needs >= 2 instances")
    p = protocol or corpus.pair_protocol()

    group_masks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if corpus.identity_groups is not None:
        groups = np.asarray(
            [g if g is not None else "" for g in corpus.identity_groups]
        )
        row_group = groups[corpus.row_identity]
        for label in sorted({str(g) for g in groups}):
            if not label:
                continue
            g_mask = row_group[p.genuine_a] == label  # within-identity: one group
            i_mask = (row_group[p.impostor_a] == label) & (
                row_group[p.impostor_b] == label
            )
            group_masks[label] = (g_mask, i_mask)

    items = []
    for instance in corpus.instance_ids:
        genuine, impostor = corpus.same_model_scores(instance, p)
        labeled = [(float(s), True) for s in genuine] + [
            (float(s), False) for s in impostor
        ]
        accuracy = verification_accuracy(labeled, folds=folds)
        overall = d_prime(genuine, impostor)
        per_group = {
            label: d_prime(genuine[g_mask], impostor[i_mask])
            for label, (g_mask, i_mask) in group_masks.items()
        }
        items.append(
            InstanceConsistency(
                instance_id=instance,
                accuracy=accuracy,
                d_prime=overall,
                group_d_prime=per_group,
            )
        )

    acc = np.asarray([item.accuracy.mean for item in items])
    dps = np.asarray([item.d_prime.value for item in items])
    group_summary = {
        label: (
            float(np.mean([item.group_d_prime[label].value for item in items])),
            float(np.std([item.group_d_prime[label].value for item in items], ddof=1)),
        )
        for label in group_masks
    }
    return ConsistencyReport(
        per_instance=tuple(items),
        accuracy_mean=float(np.mean(acc)),
        accuracy_std=float(np.std(acc, ddof=1)),
        d_prime_mean=float(np.mean(dps)),
        d_prime_std=float(np.std(dps, ddof=1)),
        group_summary=group_summary,
        seed=corpus.seed,
        config_digest=corpus.config_digest,
    )


# --------------------------------------------------------------------------
# Cross-model distributions (reference vs alternatives)


@dataclass(frozen=True)
class CrossDistribution:
    """Scores where the first row is embedded by the reference instance and
    the second by the alternative."""

    reference: str
    alternative: str
    genuine: np.ndarray
    impostor: np.ndarray
    d_prime: DPrimeValue


def cross_model_distributions(
    corpus: Corpus,
    reference: str,
    alternatives: Sequence[str],
    protocol: Optional[PairProtocol] = None,
    allow_self: bool = False,
) -> list[CrossDistribution]:
    """Score distributions for instance pairs: genuine pairs split across
    two instances score like impostors.  ``allow_self`` permits
    reference == alternative, which reproduces same-instance distributions
    (each unordered genuine pair appears in both orders)."""
    corpus.matrix(reference)  # raises on unknown id
    p = protocol or corpus.pair_protocol()
    results = []
    for alt in alternatives:
        corpus.matrix(alt)
        if alt == reference and not allow_self:
            raise ValueError("reference listed among alternatives (pass allow_self=True)")
        genuine = corpus.pair_scores(reference, alt, p.cross_a, p.cross_b)
        impostor = corpus.pair_scores(reference, alt, p.impostor_a, p.impostor_b)
        results.append(
            CrossDistribution(
                reference=reference,
                alternative=alt,
                genuine=genuine,
                impostor=impostor,
                d_prime=d_prime(genuine, impostor),
            )
        )
    return results


# --------------------------------------------------------------------------
# Relationship matrix


@dataclass(frozen=True)
class DiagonalCell:
    instance_id: str
    d_prime: DPrimeValue
    threshold: ThresholdSpec


@dataclass(frozen=True)
class CrossCell:
    """Off-diagonal entry for the unordered pair (first, second).

    Scores pool both embedding orders, so the cell for (j, i) would be
    identical; accept rates are recorded against both instances' thresholds.
    """

    first: str
    second: str
    max_cross_genuine: float
    accept_rate_vs_first: float
    accept_rate_vs_second: float
    pair_count: int


@dataclass(frozen=True)
class RelationshipMatrix:
    instance_ids: tuple[str, ...]
    fmr_target: float
    diagonal: dict[str, DiagonalCell]
    cells: dict[tuple[str, str], CrossCell]
    seed: int
    config_digest: Optional[str]

    @property
    def n(self) -> int:
        return len(self.instance_ids)

    def cell(self, first: str, second: str) -> CrossCell:
        if (first, second) in self.cells:
            return self.cells[(first, second)]
        return self.cells[(second, first)]

    def summary(self) -> dict:
        return {
            "min_diagonal_threshold": min(
                c.threshold.threshold for c in self.diagonal.values()
            ),
            "max_cross_genuine": max(
                c.max_cross_genuine for c in self.cells.values()
            ),
            "worst_accept_rate": max(
                max(c.accept_rate_vs_first, c.accept_rate_vs_second)
                for c in self.cells.values()
            ),
        }

    def as_dict(self) -> dict:
        return {
            "instances": list(self.instance_ids),
            "fmr_target": self.fmr_target,
            "diagonal": {
                iid: {
                    "d_prime": cell.d_prime.as_dict(),
                    "fmr_threshold": cell.threshold.as_dict(),
                }
                for iid, cell in sorted(self.diagonal.items())
            },
            "cells": [
                {
                    "first": cell.first,
                    "second": cell.second,
                    "max_cross_genuine": cell.max_cross_genuine,
                    "accept_rate_vs_first": cell.accept_rate_vs_first,
                    "accept_rate_vs_second": cell.accept_rate_vs_second,
                    "pair_count": cell.pair_count,
                }
                for _, cell in sorted(self.cells.items())
            ],
            "summary": self.summary(),
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        lines = ["i,j,metric,value"]
        for iid, cell in sorted(self.diagonal.items()):
            lines.append(f"{iid},{iid},d_prime,{cell.d_prime.value!r}")
            lines.append(f"{iid},{iid},fmr_threshold,{cell.threshold.threshold!r}")
            lines.append(f"{iid},{iid},empirical_fmr,{cell.threshold.empirical_fmr!r}")
        for (i, j), cell in sorted(self.cells.items()):
            lines.append(f"{i},{j},max_cross_genuine,{cell.max_cross_genuine!r}")
            lines.append(f"{i},{j},accept_rate_vs_first,{cell.accept_rate_vs_first!r}")
            lines.append(f"{i},{j},accept_rate_vs_second,{cell.accept_rate_vs_second!r}")
        return "\n".join(lines) + "\n"


def relationship_matrix(
    corpus: Corpus, fmr_target: float, protocol: Optional[PairProtocol] = None
) -> RelationshipMatrix:
    """Diagonal: same-instance d-prime and FMR threshold.  Off-diagonal
    (i < j): max cross-instance genuine score and the fraction of those
    scores strictly above each instance's threshold.

    Raises ``InsufficientImpostorsError`` when the impostor sample cannot
    resolve ``fmr_target`` at all (count < 1/target).
    """
    if len(corpus.instance_ids) < 2:
        raise InsufficientInstancesError("relationship matrix needs >= 2 instances")
    p = protocol or corpus.pair_protocol()
    if p.impostor_count < 1.0 / fmr_target:
        raise InsufficientImpostorsError(
            f"{p.impostor_count} impostor pairs cannot resolve FMR {fmr_target:g} "
            f"(need >= {int(np.ceil(1.0 / fmr_target))})"
        )

    diagonal: dict[str, DiagonalCell] = {}
    for instance in corpus.instance_ids:
        genuine, impostor = corpus.same_model_scores(instance, p)
        diagonal[instance] = DiagonalCell(
            instance_id=instance,
            d_prime=d_prime(genuine, impostor),
            threshold=fmr_threshold(impostor, fmr_target),
        )

    cells: dict[tuple[str, str], CrossCell] = {}
    for idx, first in enumerate(corpus.instance_ids):
        for second in corpus.instance_ids[idx + 1 :]:
            scores = corpus.pair_scores(first, second, p.cross_a, p.cross_b)
            t_first = diagonal[first].threshold.threshold
            t_second = diagonal[second].threshold.threshold
            cells[(first, second)] = CrossCell(
                first=first,
                second=second,
                max_cross_genuine=float(scores.max()),
                accept_rate_vs_first=float(np.count_nonzero(scores > t_first))
                / scores.size,
                accept_rate_vs_second=float(np.count_nonzero(scores > t_second))
                / scores.size,
                pair_count=int(scores.size),
            )
    return RelationshipMatrix(
        instance_ids=corpus.instance_ids,
        fmr_target=float(fmr_target),
        diagonal=diagonal,
        cells=cells,
        seed=corpus.seed,
        config_digest=corpus.config_digest,
    )


# --------------------------------------------------------------------------
# Impersonation experiment


@dataclass(frozen=True)
class ScenarioEvent:
    """Per-identity attack plan: optionally steal the live template, then
    optionally revoke, then optionally replay what was stolen."""

    identity_index: int
    steal: bool = True
    revoke: bool = True
    replay: bool = True


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SimWorldConfig
    events: tuple[ScenarioEvent, ...]
    fmr_target: float = 1e-4
    enroll_image: int = 0
    fresh_image: int = 1
    probe_image: int = 2

    def __post_init__(self) -> None:
        highest = max(self.enroll_image, self.fresh_image, self.probe_image)
        if highest >= self.config.images_per_identity:
            raise ValueError(
                f"scenario uses image index {highest} but config has only "
                f"{self.config.images_per_identity} images per identity"
            )
        for event in self.events:
            if not 0 <= event.identity_index < self.config.num_identities:
                raise ScenarioReferencesUnknownIdentityError(
                    f"event identity index {event.identity_index} outside corpus"
                )


@dataclass(frozen=True)
class ScenarioReport:
    name: str
    identities: int
    attacker_replays: int
    attacker_accepts: int
    legit_accept_before: int
    legit_accept_after: int
    non_interference_checked: bool
    non_interference_ok: bool
    fmr_target: float
    seed: int
    config_digest: str

    def as_dict(self) -> dict:
        return {
            "scenario": self.name,
            "identities": self.identities,
            "attacker_replays": self.attacker_replays,
            "attacker_accepts": self.attacker_accepts,
            "legit_accept_before": self.legit_accept_before,
            "legit_accept_after": self.legit_accept_after,
            "non_interference_checked": self.non_interference_checked,
            "non_interference_ok": self.non_interference_ok,
            "fmr_target": self.fmr_target,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


def build_scenario(
    preset: str,
    num_identities: int,
    master_seed: int,
    num_instances: int = 10,
    dim: int = 512,
    sigma: Optional[float] = None,
    fmr_target: float = 1e-4,
) -> Scenario:
    if preset not in SCENARIO_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {SCENARIO_PRESETS}")
    kwargs = {} if sigma is None else {"sigma": sigma}
    config = SimWorldConfig(
        num_identities=num_identities,
        images_per_identity=4,
        num_instances=num_instances,
        dim=dim,
        master_seed=master_seed,
        **kwargs,
    )
    steal = preset != "revoke-no-steal"
    revoke = preset != "steal-no-revoke"
    events = tuple(
        ScenarioEvent(identity_index=i, steal=steal, revoke=revoke, replay=steal)
        for i in range(num_identities)
    )
    return Scenario(name=preset, config=config, events=events, fmr_target=fmr_target)


def _enrolled_system(scenario: Scenario) -> RevocableSystem:
    """Fresh system for the scenario: thresholds calibrated per instance from
    the corpus impostor scores, then every identity enrolled."""
    config = scenario.config
    corpus = Corpus.from_config(config)
    protocol = corpus.pair_protocol()
    registry = Registry(config.dim)
    extractor = SyntheticExtractor(config)
    for instance in extractor.instances():
        _, impostor = corpus.same_model_scores(instance, protocol)
        registry.register_instance(
            instance, threshold=fmr_threshold(impostor, scenario.fmr_target), at=0.0
        )
    system = RevocableSystem(registry, extractor)
    for i in range(config.num_identities):
        system.enroll(
            config.identity_label(i),
            CaptureDescriptor(i, scenario.enroll_image),
            at=0.0,
        )
    return system


def impersonation_experiment(system: RevocableSystem, scenario: Scenario) -> ScenarioReport:
    """Steal/revoke/replay the scenario's events against an enrolled system.

    Phases: legitimate verification baseline, template theft, a
    non-interference probe around the first revocation (decisions of all
    other identities must not move by a single bit), the remaining
    revocations, attacker replays of the stolen templates, and a final
    legitimate verification sweep.
    """
    config = scenario.config
    labels = {e.identity_index: config.identity_label(e.identity_index) for e in scenario.events}
    for event in scenario.events:
        try:
            system.registry.lookup(labels[event.identity_index])
        except Exception as exc:
            raise ScenarioReferencesUnknownIdentityError(str(exc)) from exc

    def legit_sweep() -> dict[int, tuple[bool, float]]:
        return {
            i: (d.accepted, d.score)
            for i, d in (
                (
                    e.identity_index,
                    system.verify(
                        labels[e.identity_index],
                        CaptureDescriptor(e.identity_index, scenario.probe_image),
                    ),
                )
                for e in scenario.events
            )
        }

    before = legit_sweep()
    stolen = {
        e.identity_index: system.registry.lookup(labels[e.identity_index]).template
        for e in scenario.events
        if e.steal
    }

    revoke_events = [e for e in scenario.events if e.revoke]
    non_interference_checked = len(revoke_events) > 0 and len(scenario.events) > 1
    non_interference_ok = True
    if revoke_events:
        first = revoke_events[0]
        system.revoke(
            labels[first.identity_index],
            CaptureDescriptor(first.identity_index, scenario.fresh_image),
            at=0.0,
        )
        if non_interference_checked:
            after_first = legit_sweep()
            for i, (accepted, score) in before.items():
                if i == first.identity_index:
                    continue
                got = after_first[i]
                if got[0] != accepted or got[1] != score:  # bitwise: float equality
                    non_interference_ok = False
        for event in revoke_events[1:]:
            system.revoke(
                labels[event.identity_index],
                CaptureDescriptor(event.identity_index, scenario.fresh_image),
                at=0.0,
            )

    attacker_accepts = 0
    replays = 0
    for event in scenario.events:
        if event.replay and event.identity_index in stolen:
            replays += 1
            decision = system.verify_raw_template(
                labels[event.identity_index], stolen[event.identity_index]
            )
            attacker_accepts += int(decision.accepted)

    after = legit_sweep()
    return ScenarioReport(
        name=scenario.name,
        identities=len(scenario.events),
        attacker_replays=replays,
        attacker_accepts=attacker_accepts,
        legit_accept_before=sum(int(a) for a, _ in before.values()),
        legit_accept_after=sum(int(a) for a, _ in after.values()),
        non_interference_checked=non_interference_checked,
        non_interference_ok=non_interference_ok,
        fmr_target=scenario.fmr_target,
        seed=config.master_seed,
        config_digest=config.digest(),
    )


def run_scenario(scenario: Scenario) -> ScenarioReport:
    """Build the system (calibrated thresholds, all identities enrolled) and
    run the experiment."""
    return impersonation_experiment(_enrolled_system(scenario), scenario)
