import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dali.data import Label
from dali.rules import (
    And,
    Compare,
    Feat,
    FeatureVector,
    Num,
    RuleSet,
    RuleSyntaxError,
    SEED_RULES_TEXT,
    classify_features,
    classify_symbolic,
    evaluate_rule,
    extract_features,
    format_rule,
    parse_rule,
    parse_rules,
    seed_rules,
)
from strategies import rules as rule_strategy


def fv(**kw):
    base = dict(max_weight=0.25, mean_rest=0.25, std_dev=0.0, entropy=math.log(4), gini=0.0,
                top2_gap=0.0, group_size=4, dominance=0.0)
    base.update(kw)
    return FeatureVector(**base)


class TestFeatures:
    def test_uniform(self):
        f = extract_features([0.25] * 4)
        assert f.max_weight == 0.25 and f.mean_rest == 0.25
        assert f.dominance == 0.0 and f.top2_gap == 0.0
        assert f.entropy == pytest.approx(math.log(4), abs=1e-12)

    def test_dominance_six(self):
        assert extract_features([0.7, 0.1, 0.1, 0.1]).dominance == pytest.approx(6.0, abs=1e-9)

    def test_clamp_and_cap(self):
        f = extract_features([1.0, 0.0, 0.0])
        assert f.mean_rest == 1e-6 and f.dominance == 1e6

    def test_single_member(self):
        f = extract_features([1.0])
        assert f.group_size == 1 and f.max_weight == 1.0

    def test_rejects_invalid(self):
        for bad in ([], [0.5, 0.4], [1.2, -0.2]):
            with pytest.raises(ValueError):
                extract_features(bad)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant_and_bounded(self, raw, rnd):
        w = np.array(raw) / sum(raw)
        perm = list(w)
        rnd.shuffle(perm)
        perm = np.array(perm) / np.sum(perm)
        a, b = extract_features(w).as_array(), extract_features(perm).as_array()
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
        f = extract_features(w)
        assert 0.0 <= f.max_weight <= 1.0 + 1e-12
        assert -1e-12 <= f.entropy <= math.log(len(w)) + 1e-9
        assert f.dominance >= -1e-9


class TestParser:
    def test_simple(self):
        r = parse_rule("RULE lead1: IF max_weight > 0.5 THEN Leadership CONF 0.9 PRI 10")
        assert (r.name, r.label, r.confidence, r.priority) == ("lead1", Label.LEADERSHIP, 0.9, 10)
        assert r.condition == Compare(">", Feat("max_weight"), Num(0.5))

    def test_unknown_feature(self):
        text = "RULE x: IF foo > 1 THEN Leadership CONF 0.8 PRI 1"
        with pytest.raises(RuleSyntaxError, match="unknown feature 'foo'") as exc:
            parse_rule(text)
        assert exc.value.pos == text.index("foo")

    def test_and_structure(self):
        r = parse_rule("RULE d: IF dominance > 2 AND top2_gap > 0.3 THEN Leadership CONF 0.85 PRI 5")
        assert isinstance(r.condition, And)
        assert all(isinstance(c, Compare) for c in r.condition.items) and len(r.condition.items) == 2

    @pytest.mark.parametrize("text, fragment", [
        ("RULE a: IF max_weight THEN Leadership CONF 0.9 PRI 1", "must be boolean"),
        ("RULE a: IF (max_weight > 1) + 2 > 0 THEN Leadership CONF 0.9 PRI 1", "must be numeric"),
        ("RULE a: IF max_weight > 1 AND 3 THEN Leadership CONF 0.9 PRI 1", "must be boolean"),
        ("RULE a: IF NOT gini THEN Leadership CONF 0.9 PRI 1", "must be boolean"),
        ("RULE a: IF gini > 1 THEN Leader CONF 0.9 PRI 1", "expected label"),
        ("RULE a: IF gini > 1 THEN Leadership CONF 0.5 PRI 1", "confidence"),
        ("RULE a: IF gini > 1 THEN Leadership CONF 0.9 PRI 1.5", "integer priority"),
        ("RULE a: IF gini > 1 THEN Leadership CONF 0.9 PRI 1 extra", "trailing"),
        ("RULE a: IF gini $ 1 THEN Leadership CONF 0.9 PRI 1", "unexpected character"),
        ("RULE a: IF gini > THEN Leadership CONF 0.9 PRI 1", "unexpected"),
        ("RULE IF: IF gini > 1 THEN Leadership CONF 0.9 PRI 1", "rule name"),
    ])
    def test_errors(self, text, fragment):
        with pytest.raises(RuleSyntaxError, match=fragment):
            parse_rule(text)

    def test_multiline_reports_line(self):
        with pytest.raises(RuleSyntaxError, match="line 3"):
            parse_rules("# header\n" + SEED_RULES_TEXT.splitlines()[0] + "\nRULE broken: IF\n")

    def test_comments_and_blank_lines(self):
        rs = parse_rules("\n# c\n" + SEED_RULES_TEXT + "   \n")
        assert len(rs) == 2

    def test_precedence(self):
        r = parse_rule("RULE p: IF 1 + 2 * 3 == 7 OR gini > 2 AND NOT entropy < 0 THEN Collaborative CONF 0.7 PRI 0")
        assert evaluate_rule(r, fv()) == (Label.COLLABORATIVE, 0.7)
        assert format_rule(parse_rule(format_rule(r))) == format_rule(r)

    @settings(max_examples=300, deadline=None)
    @given(rule_strategy)
    def test_roundtrip(self, rule):
        text = format_rule(rule)
        parsed = parse_rule(text)
        assert parsed == rule
        assert parse_rule(format_rule(parsed)) == parsed


class TestEvaluate:
    rule = parse_rule("RULE m: IF max_weight > 0.5 THEN Leadership CONF 0.9 PRI 1")

    def test_match(self):
        assert evaluate_rule(self.rule, fv(max_weight=0.7)) == (Label.LEADERSHIP, 0.9)

    def test_no_match(self):
        assert evaluate_rule(self.rule, fv(max_weight=0.3)) is None

    def test_divide_by_zero(self):
        r = parse_rule("RULE z: IF 1 / 0 > 0 THEN Leadership CONF 0.9 PRI 1")
        assert evaluate_rule(r, fv()) is None
        dec = classify_features(RuleSet((r,)), fv())
        assert dec.trace[0].note == "division by zero" and not dec.trace[0].matched


class TestClassify:
    rules = parse_rules("RULE m: IF max_weight > 0.5 THEN Leadership CONF 0.9 PRI 10")

    def test_forced_by_rule(self):
        d = classify_symbolic(self.rules, [0.8, 0.1, 0.05, 0.05])
        assert d.label is Label.LEADERSHIP and d.probs == (0.9, pytest.approx(0.1))

    def test_default_path(self):
        d = classify_symbolic(self.rules, [0.25] * 4)
        assert d.label is Label.COLLABORATIVE and d.probs == (pytest.approx(0.4), 0.6)
        assert d.matched_rule is None

    def test_priority_wins_and_trace_lists_all(self):
        rs = parse_rules(
            "RULE low: IF gini >= 0 THEN Collaborative CONF 0.7 PRI 5\n"
            "RULE high: IF max_weight > 0.5 THEN Leadership CONF 0.9 PRI 10\n")
        d = classify_symbolic(rs, [0.8, 0.2])
        assert d.matched_rule == "high" and d.label is Label.LEADERSHIP
        assert [c.rule for c in d.trace] == ["high", "low"]
        assert all(c.matched for c in d.trace)

    def test_name_breaks_priority_ties(self):
        rs = parse_rules(
            "RULE b: IF gini >= 0 THEN Collaborative CONF 0.7 PRI 5\n"
            "RULE a: IF gini >= 0 THEN Leadership CONF 0.7 PRI 5\n")
        assert classify_features(rs, fv()).matched_rule == "a"

    def test_singleton_bypasses_rules(self):
        d = classify_symbolic(self.rules, [1.0])
        assert d.label is Label.LEADERSHIP and d.probs == (1.0, 0.0) and d.trace == ()

    def test_empty_rule_set(self):
        with pytest.raises(ValueError):
            classify_features(RuleSet(()), fv())

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
    def test_probs_sum_to_one_and_label_is_argmax(self, raw):
        w = np.array(raw) / sum(raw)
        d = classify_symbolic(seed_rules(), w)
        assert abs(sum(d.probs) - 1) < 1e-12
        assert d.label is (Label.LEADERSHIP if d.probs[0] > d.probs[1] else Label.COLLABORATIVE)
        assert d == classify_symbolic(seed_rules(), w)


class TestRuleSet:
    def test_canonical_order_and_fingerprint(self):
        a = parse_rules(SEED_RULES_TEXT)
        b = RuleSet(tuple(reversed(a.rules)))
        assert a.canonical_text() == b.canonical_text()
        assert a.fingerprint() == b.fingerprint()
        assert len(a.fingerprint()) == 64

    def test_duplicate_names(self):
        r = parse_rule("RULE a: IF gini > 0 THEN Leadership CONF 0.9 PRI 1")
        with pytest.raises(ValueError):
            RuleSet((r, r))

    def test_decision_json(self):
        d = classify_symbolic(seed_rules(), [0.7, 0.2, 0.1])
        j = d.to_json()
        assert j["label"] == "Leadership" and j["matched_rule"] == "seed_concentration"
        assert [t["rule"] for t in j["trace"]] == ["seed_concentration", "seed_dominance"]
