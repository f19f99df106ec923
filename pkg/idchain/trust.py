import logging
import math
from datetime import date, datetime, timezone
from enum import Enum
from itertools import combinations
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator

from idchain.core.config import settings
from idchain.exceptions import MissingPolicyError, TrustError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class SourceClass(str, Enum):
    GOVERNMENT = "government"
    CREDIT_BUREAU = "credit_bureau"
    DELIVERY = "delivery"
    SOCIAL = "social"
    OTHER = "other"


class SourceWeightTable(BaseModel):
    weights: dict[SourceClass, float]

    model_config = ConfigDict(frozen=True)

    @field_validator("weights")
    @classmethod
    def check_weights(cls, value: dict[SourceClass, float]) -> dict[SourceClass, float]:
        for source_class, weight in value.items():
            if not 0.0 < weight <= 1.0:
                raise ValueError(
                    f"Weight for '{source_class.value}' must be in (0, 1], got {weight}"
                )
        return value

    @classmethod
    def default(cls) -> "SourceWeightTable":
        return cls(weights=settings.TRUST_SOURCE_WEIGHTS)

    def weight(self, source_class: SourceClass) -> float:
        try:
            return self.weights[SourceClass(source_class)]
        except KeyError:
            raise TrustError(f"No weight configured for source class '{source_class}'")


class TrustParameters(BaseModel):
    half_life_days: float = Field(
        default_factory=lambda: settings.TRUST_HALF_LIFE_DAYS, gt=0
    )
    unavailability_penalty: float = Field(
        default_factory=lambda: settings.TRUST_UNAVAILABILITY_PENALTY, gt=0, le=1
    )
    staleness_factor: float = Field(
        default_factory=lambda: settings.TRUST_STALENESS_FACTOR, gt=0, le=1
    )

    model_config = ConfigDict(frozen=True)

    @property
    def half_life_seconds(self) -> float:
        return self.half_life_days * 86_400


class TrustScore(BaseModel):
    value: float = Field(ge=0.0, le=1.0)

    model_config = ConfigDict(frozen=True)

    def __float__(self) -> float:
        return self.value


class SourceEvidence(BaseModel):
    """One data owner's contribution to an attribute's score."""

    owner_id: str
    source_class: SourceClass
    last_recert: int
    available: bool = True

    model_config = ConfigDict(frozen=True)


class AttributeAssertion(BaseModel):
    attribute_name: str
    asserted_value: str
    score: TrustScore
    contributing_sources: list[SourceEvidence]
    issued_at: int

    model_config = ConfigDict(frozen=True)


class ClaimRequirement(BaseModel):
    threshold: float = Field(ge=0.0, le=1.0)
    mandatory: bool = True

    model_config = ConfigDict(frozen=True)


class ServicePolicy(BaseModel):
    claims: dict[str, ClaimRequirement] = {}

    model_config = ConfigDict(frozen=True)

    def requirement(self, name: str) -> Optional[ClaimRequirement]:
        return self.claims.get(name)


class SourceRecommendation(BaseModel):
    owner_ids: tuple[str, ...]
    score: TrustScore

    model_config = ConfigDict(frozen=True)


def single_source_score(
    weight: float,
    last_recert: float,
    now: float,
    half_life: float,
    available: bool = True,
    unavailability_penalty: Optional[float] = None,
) -> TrustScore:
    """w · 2^(−Δt / half_life), times the penalty when the source is unavailable."""
    elapsed = now - last_recert
    if elapsed < 0:
        raise TrustError(f"Re-certification time {last_recert} is after now ({now})")
    if half_life <= 0:
        raise TrustError("Half-life must be positive")
    if unavailability_penalty is None:
        unavailability_penalty = settings.TRUST_UNAVAILABILITY_PENALTY
    value = weight * math.pow(2.0, -elapsed / half_life)
    if not available:
        value *= unavailability_penalty
    return TrustScore(value=min(max(value, 0.0), 1.0))


def aggregate(scores: Sequence[TrustScore]) -> TrustScore:
    """Noisy-or: 1 − ∏(1 − sᵢ)."""
    if not scores:
        raise TrustError("Cannot aggregate an empty list of scores")
    remainder = 1.0
    for score in scores:
        remainder *= 1.0 - float(score)
    return TrustScore(value=min(max(1.0 - remainder, 0.0), 1.0))


def source_score(
    source: SourceEvidence,
    table: SourceWeightTable,
    now: int,
    params: TrustParameters,
) -> TrustScore:
    return single_source_score(
        table.weight(source.source_class),
        source.last_recert,
        now,
        params.half_life_seconds,
        source.available,
        params.unavailability_penalty,
    )


def score_sources(
    sources: Sequence[SourceEvidence],
    table: SourceWeightTable,
    now: int,
    params: Optional[TrustParameters] = None,
) -> TrustScore:
    params = params or TrustParameters()
    return aggregate([source_score(source, table, now, params) for source in sources])


def assert_attribute(
    name: str,
    value: str,
    sources: Sequence[SourceEvidence],
    table: SourceWeightTable,
    now: int,
    policy: ServicePolicy,
    params: Optional[TrustParameters] = None,
    mandatory: bool = False,
    stored: bool = False,
) -> tuple[AttributeAssertion, bool]:
    """Score an attribute and check it against the service provider's threshold.

    `stored` marks the stored-document path, whose score is multiplied by the
    staleness factor. A claim the policy does not list is granted unless the
    caller marks it mandatory, which raises MissingPolicyError.
    """
    if not sources:
        raise TrustError(f"No sources for attribute '{name}'")
    params = params or TrustParameters()
    score = score_sources(sources, table, now, params)
    if stored:
        score = TrustScore(value=score.value * params.staleness_factor)

    requirement = policy.requirement(name)
    if requirement is None:
        if mandatory:
            raise MissingPolicyError(f"No policy for mandatory attribute '{name}'")
        granted = True
    else:
        granted = score.value >= requirement.threshold

    assertion = AttributeAssertion(
        attribute_name=name,
        asserted_value=value,
        score=score,
        contributing_sources=list(sources),
        issued_at=now,
    )
    logger.debug(f"Asserted '{name}' with score {score.value:.6f} ({granted=})")
    return assertion, granted


def recommend_sources(
    attribute: str,
    threshold: float,
    catalog: Sequence[SourceEvidence],
    table: SourceWeightTable,
    now: int,
    params: Optional[TrustParameters] = None,
) -> list[SourceRecommendation]:
    """All minimal nonempty source sets whose aggregate meets the threshold.

    Ordered by set size, then descending score, then owner ids.
    """
    params = params or TrustParameters()
    singles = [source_score(source, table, now, params) for source in catalog]

    def meets(indices: tuple[int, ...]) -> bool:
        return aggregate([singles[i] for i in indices]).value >= threshold

    found = []
    for size in range(1, len(catalog) + 1):
        for indices in combinations(range(len(catalog)), size):
            if not meets(indices):
                continue
            # noisy-or is monotone, so checking the one-smaller subsets suffices
            if size > 1 and any(
                meets(indices[:k] + indices[k + 1 :]) for k in range(size)
            ):
                continue
            found.append(
                SourceRecommendation(
                    owner_ids=tuple(catalog[i].owner_id for i in indices),
                    score=aggregate([singles[i] for i in indices]),
                )
            )

    found.sort(key=lambda r: (len(r.owner_ids), -r.score.value, r.owner_ids))
    logger.debug(
        f"Found {len(found)} minimal source sets for '{attribute}' at {threshold}"
    )
    return found


# Predicate claims: "<predicate>:<argument>" evaluated over a base attribute, so the
# service provider learns only the boolean.
PREDICATE_BASE_ATTRIBUTES = {"age_at_least": "dob"}


def is_predicate_claim(claim: str) -> bool:
    return claim.split(":", 1)[0] in PREDICATE_BASE_ATTRIBUTES and ":" in claim


def base_attribute(claim: str) -> str:
    if is_predicate_claim(claim):
        return PREDICATE_BASE_ATTRIBUTES[claim.split(":", 1)[0]]
    return claim


def _age_on(birth: date, today: date) -> int:
    before_birthday = (today.month, today.day) < (birth.month, birth.day)
    return today.year - birth.year - before_birthday


def evaluate_predicate(claim: str, value: str, now: int) -> str:
    predicate, _, argument = claim.partition(":")
    if predicate == "age_at_least":
        try:
            birth = date.fromisoformat(value)
            years = int(argument)
        except ValueError as e:
            raise TrustError(f"Cannot evaluate '{claim}': {e}") from e
        today = datetime.fromtimestamp(now, tz=timezone.utc).date()
        return "true" if _age_on(birth, today) >= years else "false"
    raise TrustError(f"Unknown predicate claim '{claim}'")
