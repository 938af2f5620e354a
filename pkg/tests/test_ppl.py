import json
import math

import pytest
from hypothesis import given, strategies as st

from manner_align.align import AlignSettings, align_corpus
from manner_align.backends import (
    ReferenceBackend,
    ReferenceModel,
    ScoredToken,
    TokenizationMismatch,
)
from manner_align.corpus import QARound, parse_dataset, split_rounds
from manner_align.ppl import (
    CONTEXT_TEMPLATE,
    PplReport,
    SplitSpec,
    TokenSequence,
    answer_ppl,
    corpus_gap_report,
    sequence_ppl,
)

from conftest import GAP_MODEL_TEXT, make_record


def seq(logprobs):
    return TokenSequence(
        tuple(ScoredToken(f"t{i}", lp) for i, lp in enumerate(logprobs)), ("r", 0)
    )


def test_uniform_over_four():
    assert sequence_ppl(seq([math.log(0.25)] * 3)) == pytest.approx(4.0, abs=1e-12)


def test_certainty():
    assert sequence_ppl(seq([0.0, 0.0, 0.0])) == pytest.approx(1.0, abs=1e-15)


def test_geometric_mean_closed_form():
    value = sequence_ppl(seq([math.log(0.5), math.log(0.25)]))
    assert value == pytest.approx(2 * math.sqrt(2), rel=1e-9)


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        TokenSequence((), ("r", 0))


@given(st.lists(st.floats(min_value=-20, max_value=0), min_size=1, max_size=20),
       st.randoms())
def test_permutation_invariance(logprobs, rng):
    shuffled = list(logprobs)
    rng.shuffle(shuffled)
    assert sequence_ppl(seq(shuffled)) == pytest.approx(sequence_ppl(seq(logprobs)))


@given(st.lists(st.floats(min_value=-10, max_value=-0.01), min_size=1, max_size=10))
def test_appending_certain_token_dilutes(logprobs):
    base = sequence_ppl(seq(logprobs))
    if base > 1.0:
        assert sequence_ppl(seq(logprobs + [0.0])) < base


# ── answer_ppl against the in-repo bigram table ─────────────────────────────

HALF_MODEL = """\
BIGRAM <s> the 0.5
BIGRAM the cat 0.5
BIGRAM cat is 0.5
BIGRAM is red 0.5
BIGRAM red red 0.5
"""


def test_answer_ppl_all_half():
    backend = ReferenceBackend(ReferenceModel.from_text(HALF_MODEL))
    round = QARound("r", 0, "What?", "the cat is red")
    assert answer_ppl(round, backend) == pytest.approx(2.0, rel=1e-12)


def test_answer_ppl_certain_path():
    model = ReferenceModel.from_text(
        "BIGRAM <s> the 1.0\nBIGRAM the cat 1.0\nBIGRAM cat is 1.0"
    )
    backend = ReferenceBackend(model)
    assert answer_ppl(QARound("r", 0, "q", "the cat is"), backend) == pytest.approx(1.0)


def test_answer_ppl_oov_propagates():
    backend = ReferenceBackend(ReferenceModel.from_text(HALF_MODEL))
    with pytest.raises(TokenizationMismatch):
        answer_ppl(QARound("r", 0, "q", "the zebra"), backend)


def gap_corpus(n_records, aligned=False):
    originals = [
        "The colour of the automobile is red.",
        "The colour of the feline is blue.",
    ]
    styled = [
        "The car's color is red.",
        "The cat's color is blue.",
    ]
    answers = styled if aligned else originals
    objs = [
        make_record(f"g{i:04d}", [(f"Describe {i}.", answers[i % 2])])
        for i in range(n_records)
    ]
    return parse_dataset(json.dumps(objs))


def test_corpus_report_brute_force(gap_backend):
    records = gap_corpus(100)
    report = corpus_gap_report(records, gap_backend, SplitSpec(100))
    # independent brute-force pass
    total_lp = 0.0
    total_tokens = 0
    for rec in records:
        for r in split_rounds(rec):
            tokens = gap_backend.score_tokens(
                CONTEXT_TEMPLATE.format(question=r.question), r.answer
            )
            total_lp += sum(t.logprob for t in tokens)
            total_tokens += len(tokens)
    assert report.token_total == total_tokens
    assert report.corpus_ppl == pytest.approx(math.exp(-total_lp / total_tokens), rel=1e-9)
    assert len(report.per_round_ppl) == 100


def test_corpus_report_token_weighted(gap_backend):
    # corpus PPL is token-weighted, not a mean of per-round PPLs
    records = gap_corpus(10)
    report = corpus_gap_report(records, gap_backend, SplitSpec(10))
    round_mean = sum(v for _s, v in report.per_round_ppl) / len(report.per_round_ppl)
    assert report.corpus_ppl != pytest.approx(round_mean, rel=1e-6) or len(
        {v for _s, v in report.per_round_ppl}
    ) == 1


def test_eval_split_is_corpus_tail(gap_backend):
    records = gap_corpus(20)
    report = corpus_gap_report(records, gap_backend, SplitSpec(5))
    scored_ids = {rid for (rid, _ri), _v in report.per_round_ppl}
    assert scored_ids == {r.id for r in records[-5:]}
    with pytest.raises(ValueError):
        corpus_gap_report(records, gap_backend, SplitSpec(21))


def test_gap_direction_aligned_lower(gap_backend, tag_map):
    original = gap_corpus(60)
    aligned, _report = align_corpus(
        original, ReferenceBackend(), tag_map, AlignSettings(concurrency=2)
    )
    split = SplitSpec(60)
    ppl_original = corpus_gap_report(original, gap_backend, split).corpus_ppl
    ppl_aligned = corpus_gap_report(aligned, gap_backend, split).corpus_ppl
    assert ppl_aligned < ppl_original


def test_report_json_shape(gap_backend):
    records = gap_corpus(4)
    obj = corpus_gap_report(records, gap_backend, SplitSpec(4)).to_json_obj()
    assert obj["backend_name"] == "gap-ref"
    assert obj["eval_count"] == 4
    assert {"record_id", "round_index", "ppl"} <= set(obj["per_round"][0])
    assert "direct-PPL" in obj["note"]
