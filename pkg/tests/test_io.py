import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepmodel.core import Hypnogram
from sleepmodel.io import (
    FormatError,
    format_hypnograms,
    format_likelihoods,
    parse_hypnograms,
    parse_likelihoods,
    read_hypnograms,
    read_likelihoods,
    read_stochastic_matrix,
    write_hypnograms,
    write_likelihoods,
    write_stochastic_matrix,
)

record_ids = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters="-_."),
                     min_size=1, max_size=12)


@given(st.lists(st.tuples(record_ids, st.lists(st.integers(0, 4), min_size=1, max_size=40)),
                min_size=1, max_size=5))
def test_hypnogram_text_round_trip(items):
    recs = [Hypnogram.from_indices(rid, s) for rid, s in items]
    assert parse_hypnograms(format_hypnograms(recs)) == recs


def test_hypnogram_parsing_details():
    text = "# comment\nW N1\n\nN2\n== second\n  REM  # not a comment token\n"
    with pytest.raises(FormatError) as info:
        parse_hypnograms(text)
    assert info.value.line == 6

    recs = parse_hypnograms("# scored by hand\nW N1\nN2\n== second\nREM\n", default_id="night")
    assert [r.record_id for r in recs] == ["night", "second"]
    assert recs[0].indices().tolist() == [0, 2, 3]


def test_hypnogram_errors_carry_line_numbers():
    with pytest.raises(FormatError) as info:
        parse_hypnograms("== a\nW\nN4\n")
    assert info.value.line == 3
    with pytest.raises(FormatError):
        parse_hypnograms("== a\n== b\nW\n")
    with pytest.raises(FormatError):
        parse_hypnograms("==\nW\n")


def test_hypnogram_file_default_id(tmp_path):
    p = tmp_path / "night7.hyp"
    p.write_text("W\nW\nN1\n")
    (rec,) = read_hypnograms(p)
    assert rec.record_id == "night7"
    write_hypnograms(tmp_path / "out.hyp", [rec])
    assert read_hypnograms(tmp_path / "out.hyp") == [rec]


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_likelihood_round_trip_is_lossless(t, seed):
    m = np.random.default_rng(seed).dirichlet(np.full(5, 0.3), size=t)
    back = parse_likelihoods(format_likelihoods(m))
    assert np.array_equal(back, m)


def test_likelihood_file_round_trip(tmp_path, rng):
    m = rng.dirichlet(np.ones(5), size=12)
    write_likelihoods(tmp_path / "a.csv", m)
    assert np.array_equal(read_likelihoods(tmp_path / "a.csv"), m)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "W,REM,N1,N2,N3"


def test_likelihood_renormalization_thresholds():
    ok = "W,REM,N1,N2,N3\n0.2,0.2,0.2,0.2,0.2\n"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_likelihoods(ok)
        # 5e-7 off: silently renormalized
        m = parse_likelihoods("W,REM,N1,N2,N3\n0.2000005,0.2,0.2,0.2,0.2\n")
    assert m.sum() == pytest.approx(1.0, abs=1e-15)

    with pytest.warns(UserWarning):
        m = parse_likelihoods("W,REM,N1,N2,N3\n0.2005,0.2,0.2,0.2,0.2\n")
    assert m.sum() == pytest.approx(1.0, abs=1e-15)

    with pytest.raises(FormatError) as info:
        parse_likelihoods("W,REM,N1,N2,N3\n0.2,0.2,0.2,0.2,0.2\n0.3,0.2,0.2,0.2,0.2\n")
    assert info.value.line == 3


@pytest.mark.parametrize("text, line", [
    ("W,N1,REM,N2,N3\n0.2,0.2,0.2,0.2,0.2\n", 1),
    ("W,REM,N1,N2,N3\n0.2,0.2,0.2,0.4\n", 2),
    ("W,REM,N1,N2,N3\n0.2,0.2,x,0.2,0.2\n", 2),
    ("W,REM,N1,N2,N3\n1.2,-0.2,0,0,0\n", 2),
    ("W,REM,N1,N2,N3\n", None),
])
def test_likelihood_format_errors(text, line):
    with pytest.raises(FormatError) as info:
        parse_likelihoods(text)
    assert info.value.line == line


def test_stochastic_matrix_round_trip(tmp_path, table1):
    write_stochastic_matrix(tmp_path / "p.csv", table1.transition)
    assert np.array_equal(read_stochastic_matrix(tmp_path / "p.csv"), table1.transition)
    (tmp_path / "q.csv").write_text("\n".join(",".join(["0.2"] * 5) for _ in range(5)))
    assert read_stochastic_matrix(tmp_path / "q.csv").shape == (5, 5)


def test_stochastic_matrix_validation(tmp_path):
    (tmp_path / "short.csv").write_text("1,0,0,0,0\n")
    with pytest.raises(FormatError):
        read_stochastic_matrix(tmp_path / "short.csv")
    rows = ["1,0,0,0,0"] * 4 + ["0.5,0,0,0,0"]
    (tmp_path / "bad.csv").write_text("\n".join(rows))
    with pytest.raises(FormatError) as info:
        read_stochastic_matrix(tmp_path / "bad.csv")
    assert info.value.line == 5
