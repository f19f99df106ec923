import random
from itertools import combinations

import pytest
from hypothesis import given, settings as hypothesis_settings, strategies as st

from idchain.exceptions import MissingPolicyError, TrustError
from idchain.trust import (
    ClaimRequirement,
    ServicePolicy,
    SourceClass,
    SourceEvidence,
    SourceWeightTable,
    TrustParameters,
    TrustScore,
    aggregate,
    assert_attribute,
    base_attribute,
    evaluate_predicate,
    recommend_sources,
    score_sources,
    single_source_score,
)


DAY = 86_400
HALF_LIFE = 180 * DAY
NOW = 1_700_000_000
TOLERANCE = 1e-12


@pytest.fixture
def table() -> SourceWeightTable:
    return SourceWeightTable.default()


def evidence(owner_id: str, source_class: SourceClass, age: int = 0, available=True):
    return SourceEvidence(
        owner_id=owner_id,
        source_class=source_class,
        last_recert=NOW - age,
        available=available,
    )


def policy(**thresholds: float) -> ServicePolicy:
    return ServicePolicy(
        claims={name: ClaimRequirement(threshold=t) for name, t in thresholds.items()}
    )


def brute_force_minimal_sets(catalog, table, threshold, params):
    def meets(subset):
        return score_sources(subset, table, NOW, params).value >= threshold

    results = []
    for size in range(1, len(catalog) + 1):
        for subset in combinations(catalog, size):
            if not meets(list(subset)):
                continue
            proper = [
                list(smaller)
                for k in range(1, size)
                for smaller in combinations(subset, k)
            ]
            if any(meets(smaller) for smaller in proper):
                continue
            results.append(tuple(source.owner_id for source in subset))
    return results


class TestSingleSource:
    def test_hello(self):
        assert True

    def test_defaults(self, table, settings):
        assert table.weight(SourceClass.GOVERNMENT) == 0.95
        assert table.weight(SourceClass.CREDIT_BUREAU) == 0.85
        assert table.weight(SourceClass.DELIVERY) == 0.70
        assert table.weight(SourceClass.SOCIAL) == 0.50
        assert TrustParameters().half_life_seconds == HALF_LIFE
        assert settings.TRUST_STALENESS_FACTOR == 0.9

    def test_no_decay(self):
        score = single_source_score(0.95, NOW, NOW, HALF_LIFE)
        assert abs(score.value - 0.95) < TOLERANCE

    def test_one_half_life(self):
        score = single_source_score(0.95, NOW - HALF_LIFE, NOW, HALF_LIFE)
        assert abs(score.value - 0.475) < TOLERANCE

    def test_unavailable_penalty(self):
        score = single_source_score(0.95, NOW, NOW, HALF_LIFE, available=False)
        assert abs(score.value - 0.475) < TOLERANCE

    def test_negative_elapsed(self):
        with pytest.raises(TrustError):
            single_source_score(0.95, NOW + 1, NOW, HALF_LIFE)

    def test_non_positive_half_life(self):
        with pytest.raises(TrustError):
            single_source_score(0.95, NOW, NOW, 0)

    def test_rejects_bad_weight(self):
        with pytest.raises(ValueError):
            SourceWeightTable(weights={SourceClass.SOCIAL: 1.5})

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(
        weight=st.floats(min_value=0.01, max_value=1.0),
        first=st.integers(min_value=0, max_value=10 * HALF_LIFE),
        second=st.integers(min_value=0, max_value=10 * HALF_LIFE),
        available=st.booleans(),
    )
    def test_monotone_decay(self, weight, first, second, available):
        shorter, longer = sorted([first, second])
        recent = single_source_score(weight, NOW - shorter, NOW, HALF_LIFE, available)
        older = single_source_score(weight, NOW - longer, NOW, HALF_LIFE, available)
        assert 0.0 <= older.value <= recent.value <= 1.0


class TestAggregate:
    def test_singleton(self):
        assert aggregate([TrustScore(value=0.9)]).value == pytest.approx(0.9, abs=1e-12)

    def test_two_sources(self):
        scores = [TrustScore(value=0.9), TrustScore(value=0.8)]
        assert abs(aggregate(scores).value - 0.98) < TOLERANCE

    def test_zero_absorbs_nothing(self):
        scores = [TrustScore(value=0.37), TrustScore(value=0.0)]
        assert abs(aggregate(scores).value - 0.37) < TOLERANCE

    def test_empty(self):
        with pytest.raises(TrustError):
            aggregate([])

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(
        values=st.lists(
            st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=8
        ),
        extra=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_monotone_and_bounded(self, values, extra):
        scores = [TrustScore(value=v) for v in values]
        base = aggregate(scores).value
        assert max(values) - TOLERANCE <= base <= 1.0
        assert aggregate(scores + [TrustScore(value=extra)]).value >= base - TOLERANCE
        assert abs(aggregate(list(reversed(scores))).value - base) < TOLERANCE


class TestAssertAttribute:
    def test_government_granted(self, table):
        assertion, granted = assert_attribute(
            "dob",
            "1990-01-01",
            [evidence("dmv", SourceClass.GOVERNMENT)],
            table,
            NOW,
            policy(dob=0.9),
        )
        assert granted
        assert abs(assertion.score.value - 0.95) < TOLERANCE
        assert assertion.contributing_sources[0].owner_id == "dmv"
        assert assertion.issued_at == NOW

    def test_social_denied(self, table):
        assertion, granted = assert_attribute(
            "dob",
            "1990-01-01",
            [evidence("social", SourceClass.SOCIAL)],
            table,
            NOW,
            policy(dob=0.9),
        )
        assert not granted
        assert abs(assertion.score.value - 0.5) < TOLERANCE

    def test_social_and_government(self, table):
        assertion, granted = assert_attribute(
            "dob",
            "1990-01-01",
            [
                evidence("social", SourceClass.SOCIAL),
                evidence("dmv", SourceClass.GOVERNMENT),
            ],
            table,
            NOW,
            policy(dob=0.9),
        )
        assert granted
        assert abs(assertion.score.value - 0.975) < TOLERANCE

    def test_stored_path_staleness(self, table):
        sources = [evidence("dmv", SourceClass.GOVERNMENT, age=30 * DAY)]
        owner_path, _ = assert_attribute(
            "dob", "x", sources, table, NOW, policy(dob=0.5)
        )
        stored_path, _ = assert_attribute(
            "dob", "x", sources, table, NOW, policy(dob=0.5), stored=True
        )
        assert stored_path.score.value == pytest.approx(
            owner_path.score.value * 0.9, abs=TOLERANCE
        )
        assert stored_path.score.value < owner_path.score.value

    def test_recertification_never_lowers(self, table):
        stale = [evidence("dmv", SourceClass.GOVERNMENT, age=400 * DAY)]
        fresh = [evidence("dmv", SourceClass.GOVERNMENT, age=1 * DAY)]
        before, _ = assert_attribute("dob", "x", stale, table, NOW, policy(dob=0.5))
        after, _ = assert_attribute("dob", "x", fresh, table, NOW, policy(dob=0.5))
        assert after.score.value >= before.score.value

    def test_missing_mandatory_policy(self, table):
        with pytest.raises(MissingPolicyError):
            assert_attribute(
                "address",
                "x",
                [evidence("dmv", SourceClass.GOVERNMENT)],
                table,
                NOW,
                policy(dob=0.9),
                mandatory=True,
            )

    def test_optional_claim_without_policy(self, table):
        _, granted = assert_attribute(
            "address",
            "x",
            [evidence("dmv", SourceClass.GOVERNMENT)],
            table,
            NOW,
            policy(dob=0.9),
        )
        assert granted

    def test_requires_sources(self, table):
        with pytest.raises(TrustError):
            assert_attribute("dob", "x", [], table, NOW, policy(dob=0.9))


class TestRecommendSources:
    def test_threshold_zero_returns_singletons(self, table):
        catalog = [
            evidence("a", SourceClass.SOCIAL),
            evidence("b", SourceClass.GOVERNMENT),
        ]
        result = recommend_sources("dob", 0.0, catalog, table, NOW)
        assert [r.owner_ids for r in result] == [("b",), ("a",)]

    def test_unattainable(self, table):
        catalog = [evidence(str(i), SourceClass.CREDIT_BUREAU) for i in range(5)]
        assert recommend_sources("dob", 1.0, catalog, table, NOW) == []

    def test_three_sources(self, table):
        catalog = [
            evidence("social", SourceClass.SOCIAL),
            evidence("courier", SourceClass.DELIVERY),
            evidence("bank", SourceClass.CREDIT_BUREAU),
        ]
        result = recommend_sources("dob", 0.9, catalog, table, NOW)
        # bank alone 0.85; bank+social 0.925; bank+courier 0.955; social+courier 0.85
        assert [r.owner_ids for r in result] == [
            ("courier", "bank"),
            ("social", "bank"),
        ]
        params = TrustParameters()
        expected = brute_force_minimal_sets(catalog, table, 0.9, params)
        assert sorted(r.owner_ids for r in result) == sorted(expected)

    def test_matches_brute_force_on_random_catalogs(self, table):
        rng = random.Random(11)
        params = TrustParameters()
        for _ in range(10):
            catalog = [
                evidence(
                    f"owner-{i}",
                    rng.choice(list(SourceClass)),
                    age=rng.randrange(0, 400 * DAY),
                    available=rng.random() > 0.2,
                )
                for i in range(rng.randrange(1, 7))
            ]
            threshold = rng.choice([0.5, 0.8, 0.9, 0.95, 0.99])
            result = recommend_sources("dob", threshold, catalog, table, NOW, params)
            expected = brute_force_minimal_sets(catalog, table, threshold, params)
            assert sorted(r.owner_ids for r in result) == sorted(expected)
            sizes = [len(r.owner_ids) for r in result]
            assert sizes == sorted(sizes)


class TestPredicates:
    def test_base_attribute(self):
        assert base_attribute("age_at_least:21") == "dob"
        assert base_attribute("address") == "address"

    @pytest.mark.parametrize(
        "dob, expected",
        [("2000-01-01", "true"), ("2003-11-14", "true"), ("2003-11-15", "false")],
    )
    def test_age_at_least(self, dob, expected):
        # NOW is 2023-11-14T22:13:20Z
        assert evaluate_predicate("age_at_least:20", dob, NOW) == expected

    def test_bad_value(self):
        with pytest.raises(TrustError):
            evaluate_predicate("age_at_least:21", "not a date", NOW)


@pytest.mark.acceptance
class TestAcceptanceSweeps:
    def test_recommend_matches_brute_force_100_catalogs(self, table):
        rng = random.Random(12)
        params = TrustParameters()
        for _ in range(100):
            catalog = [
                evidence(
                    f"owner-{i}",
                    rng.choice(list(SourceClass)),
                    age=rng.randrange(0, 400 * DAY),
                    available=rng.random() > 0.2,
                )
                for i in range(8)
            ]
            threshold = rng.uniform(0.5, 0.999)
            result = recommend_sources("dob", threshold, catalog, table, NOW, params)
            expected = brute_force_minimal_sets(catalog, table, threshold, params)
            assert sorted(r.owner_ids for r in result) == sorted(expected)
