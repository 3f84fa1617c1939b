import json

import httpx
import numpy as np
import pytest

from resboost import expr as E
from resboost.chain import ChainState, init_seed
from resboost.dataset import feature_stats
from resboost.experts import HistoryEntry
from resboost.provider import (BrokenProvider, CandidateExpert, ErrorReport, IterationFailed,
                               LlmConfig, LlmProvider, MockProvider, ProviderError, SpaceEntry,
                               ValidationError, build_prompt, error_tag, extract, make_provider,
                               validate)
from resboost.regions import INF, Clause, Region

from conftest import make_dataset

NAMES = ("x1", "x2", "x3")


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(0)
    X = rng.random((300, 3))
    y = (rng.random(300) < 0.2 + 0.6 * X[:, 2]).astype(int)
    d = make_dataset(X, y, NAMES)
    z = np.log(0.5 / 0.5) + 2.0 * (X[:, 0] - 0.5)
    stats = feature_stats(d, d)
    return d, z, stats


def state_for(region, history=(), t=0):
    seed = init_seed(region, NAMES)
    return ChainState(region, seed, 0.7, t=t, history=list(history), box=region.clauses)


BIG = Region(0, (Clause("x3", 2, 0.3, INF),), 0.5, 0, 0.0)


def test_error_tags():
    assert error_tag(1, 0.2) == "FALSE_NEG"
    assert error_tag(0, 0.8) == "FALSE_POS"
    assert error_tag(1, 0.55) == "HIGH_UNCERTAINTY"
    assert error_tag(0, 0.4) == "HIGH_UNCERTAINTY"
    assert error_tag(0, 0.1) == "CONFIDENT_OK"


def test_sample_count_and_region_isolation(world):
    d, z, stats = world
    p = build_prompt(state_for(BIG), d, stats, z, N=20)
    assert len(p.samples_block.splitlines()) == 20
    assert BIG.contains(d.X[list(p.sample_rows)]).all()
    assert len(set(p.sample_rows)) == 20
    for line in p.samples_block.splitlines():
        assert line.split("]")[0].lstrip("[") in ("FALSE_NEG", "FALSE_POS",
                                                  "HIGH_UNCERTAINTY", "CONFIDENT_OK")
    small = Region(1, (Clause("x1", 0, -INF, 0.03),), 0.1, 0, 0.0)
    n_small = int(small.contains(d.X).sum())
    assert 0 < n_small < 20
    ps = build_prompt(state_for(small), d, stats, z, N=20)
    assert len(ps.samples_block.splitlines()) == n_small
    empty = Region(2, (Clause("x1", 0, 5.0, INF),), 0.1, 0, 0.0)
    with pytest.raises(ValueError):
        build_prompt(state_for(empty), d, stats, z)


def test_prompt_blocks_populated(world):
    d, z, stats = world
    neg = HistoryEntry(1, "add term on x1", False, "no gain", "no-gain")
    pos = HistoryEntry(2, "add term on x3", True, "gain", "accepted")
    p = build_prompt(state_for(BIG, [neg, pos], t=2), d, stats, z, m_top=2)
    assert p.region_rule == "x3 > 0.3"
    assert "if `x3` > 0.3 then p{c0=0} else 0" in p.seed_function
    assert len([ln for ln in p.stats_block.splitlines() if "IV=" in ln]) == 2
    assert "- add term on x1" in p.constraints_block
    assert "+ add term on x3" in p.constraints_block
    assert p == build_prompt(state_for(BIG, [neg, pos], t=2), d, stats, z, m_top=2)


def test_mock_is_deterministic(world):
    d, z, stats = world
    p = build_prompt(state_for(BIG), d, stats, z)
    a = MockProvider(3).propose(p, 17)
    assert a == MockProvider(3).propose(p, 17)
    valid = validate(a, NAMES, state_for(BIG).seed, BIG.clauses)
    assert {s.name for s in a.search_space} == {s.name for s in valid.expr.free_params()}


def test_mock_avoids_rejected_mutations(world):
    d, z, stats = world
    banned = "add gauss bump on x2"
    hist = [HistoryEntry(1, banned, False, "no gain", "no-gain")]
    p = build_prompt(state_for(BIG, hist, t=1), d, stats, z)
    intents = {MockProvider(0).propose(p, s).intent for s in range(200)}
    assert banned not in intents
    assert len(intents) > 3


def test_every_mock_mutation_validates(world):
    d, z, stats = world
    st = state_for(BIG)
    p = build_prompt(st, d, stats, z)
    mock = MockProvider(0)
    for kind, _, args in mock.menu(p):
        text, space = mock._apply(p, kind, args)
        validate(CandidateExpert(text, kind, space), NAMES, st.seed, BIG.clauses)


def test_repair_unknown_feature_uses_top_region_feature(world):
    d, z, stats = world
    st = state_for(BIG)
    p = build_prompt(st, d, stats, z)
    cand = CandidateExpert("if `x3` > 0.3 then p{c0=0} * `nope` else 0", "x",
                           (SpaceEntry("c0", -1, 1),))
    with pytest.raises(ValidationError) as info:
        validate(cand, NAMES, st.seed, BIG.clauses)
    report = info.value.report
    assert report.kind == "unknown-feature" and "nope" in report.message
    fixed = MockProvider().repair(p, cand, report, 1)
    assert "`x3`" in fixed.dsl_text and "nope" not in fixed.dsl_text
    validate(fixed, NAMES, st.seed, BIG.clauses)


def test_repair_drops_frozen_slot_from_space(world):
    d, z, stats = world
    seed = E.parse("if `x3` > 0.3 then p{c0=0.5,frozen} else 0", NAMES)
    st = ChainState(BIG, seed, 0.7, box=BIG.clauses)
    p = build_prompt(st, d, stats, z)
    cand = CandidateExpert("if `x3` > 0.3 then p{c0=0.5,frozen} + p{c1=0} * `x1` else 0", "t",
                           (SpaceEntry("c0", -1, 1), SpaceEntry("c1", -1, 1)))
    with pytest.raises(ValidationError) as info:
        validate(cand, NAMES, seed, BIG.clauses)
    assert info.value.report.kind == "frozen-slot"
    fixed = MockProvider().repair(p, cand, info.value.report, 1)
    assert [s.name for s in fixed.search_space] == ["c1"]
    v = validate(fixed, NAMES, seed, BIG.clauses)
    assert v.space.frozen == {"c0": 0.5}


def test_frozen_values_are_pinned_even_if_text_changes_them():
    seed = E.parse("if `x3` > 0.3 then p{c0=0.5,frozen} else 0", NAMES)
    cand = CandidateExpert("if `x3` > 0.3 then p{c0=9} else 0", "t", ())
    v = validate(cand, NAMES, seed, BIG.clauses)
    assert v.expr.slot("c0").value == 0.5 and v.expr.slot("c0").frozen


def test_validation_rules():
    seed = init_seed(BIG, NAMES)
    ok = "if `x3` > 0.3 and `x1` <= p{b0=0.8} then p{c0=0} else 0"
    space = (SpaceEntry("b0", 0.5, 1.0), SpaceEntry("c0", -1, 1))
    validate(CandidateExpert(ok, "", space), NAMES, seed, BIG.clauses)
    cases = [
        (ok, space[:1], "missing-space"),
        (ok, space + (SpaceEntry("zz", 0, 1),), "unknown-slot"),
        (ok, space + (space[0],), "duplicate-space"),
        (ok, (space[0], SpaceEntry("c0", 1, -1)), "bad-bounds"),
        ("if `x1` > 0 then p{c0=0} else 0", space[1:], "guard-widening"),
        ("if `x3` > p{b0=0.3} then p{c0=0} else 0",
         (SpaceEntry("b0", 0.1, 0.5), space[1]), "guard-widening"),
        ("if then", (), "syntax"),
    ]
    for text, sp, kind in cases:
        with pytest.raises(ValidationError) as info:
            validate(CandidateExpert(text, "", sp), NAMES, seed, BIG.clauses)
        assert info.value.report.kind == kind, (text, kind)


def test_repair_attempts_exhausted(world):
    d, z, stats = world
    p = build_prompt(state_for(BIG), d, stats, z)
    rep = ErrorReport("syntax", "bad")
    cand = CandidateExpert("if", "", ())
    for prov in (MockProvider(), BrokenProvider()):
        with pytest.raises(IterationFailed):
            prov.repair(p, cand, rep, 4, 3)


def test_make_provider():
    assert isinstance(make_provider("mock"), MockProvider)
    assert isinstance(make_provider("broken"), BrokenProvider)
    with pytest.raises(ValueError):
        make_provider("oracle")


# -- chat endpoint ----------------------------------------------------------

REPLY = """Here is the update.
```
if `x3` > 0.3 then p{c0=0} + p{c1=0.1} * `x2` else 0
```
SEARCH_SPACE: [{"name": "c0", "lower": -2, "upper": 2}, {"name": "c1", "lower": -1, "upper": 1, "scale": "linear"}]
INTENT: add term on x2
"""


def test_extract_reply():
    c = extract(REPLY)
    assert c.error is None and c.intent == "add term on x2"
    assert c.dsl_text.startswith("if `x3`")
    assert [s.name for s in c.search_space] == ["c0", "c1"]
    assert extract("no code here").error.startswith("no fenced")
    assert "SEARCH_SPACE" in extract("```\nif\n```").error
    assert extract("```\nx\n```\nSEARCH_SPACE: {oops").error


def test_extraction_error_routes_to_repair():
    with pytest.raises(ValidationError) as info:
        validate(extract("nothing fenced"), NAMES, init_seed(BIG, NAMES), BIG.clauses)
    assert info.value.report.kind == "extraction"


def chat_body(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def test_llm_round_trip_with_retries(world, tmp_path):
    d, z, stats = world
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json=chat_body(REPLY))

    log = tmp_path / "t.jsonl"
    prov = LlmProvider(LlmConfig(backoff=0.0), log, transport=httpx.MockTransport(handler))
    p = build_prompt(state_for(BIG), d, stats, z)
    c = prov.propose(p, 5)
    assert c.intent == "add term on x2" and len(calls) == 2
    assert calls[-1]["temperature"] == 0.1 and calls[-1]["seed"] == 5
    assert calls[-1]["messages"][0]["role"] == "system"
    rec = json.loads(log.read_text().splitlines()[0])
    assert rec["response"] == REPLY

    fixed = prov.repair(p, c, ErrorReport("syntax", "syntax error at line 1, column 4: x"), 1)
    assert "syntax error at line 1, column 4" in calls[-1]["messages"][-1]["content"]
    assert fixed.intent == "add term on x2"


def test_llm_transport_failures():
    down = httpx.MockTransport(lambda r: httpx.Response(500))
    prov = LlmProvider(LlmConfig(backoff=0.0, max_retries=2), transport=down)
    with pytest.raises(ProviderError, match="3 tries"):
        prov.chat([{"role": "user", "content": "hi"}])
    denied = httpx.MockTransport(lambda r: httpx.Response(401))
    with pytest.raises(ProviderError, match="rejected"):
        LlmProvider(LlmConfig(backoff=0.0), transport=denied).chat([])
