import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from udalm.corpus import (SOURCE, TARGET, DataError, DomainShiftSpec, EncodedSplits, LabeledExample,
                          QuarantineError, build_lexicon, generate_examples, generate_general_corpus,
                          generate_synthetic_pair, load_records, make_splits, subsample_target,
                          write_records)


def _labeled(n, domain="src", label=None):
    return [LabeledExample(f"w{i}", i % 2 if label is None else label, domain, f"{domain}:{i}")
            for i in range(n)]


class TestGenerator:
    def test_deterministic(self):
        spec = DomainShiftSpec()
        assert generate_examples(spec, SOURCE, 50, 4) == generate_examples(spec, SOURCE, 50, 4)
        assert generate_examples(spec, SOURCE, 50, 4) != generate_examples(spec, SOURCE, 50, 5)

    def test_class_balance(self):
        labels = [e.label for e in generate_examples(DomainShiftSpec(), TARGET, 4000, 1)]
        # 4 binomial standard errors at n=4000
        assert abs(np.mean(labels) - 0.5) < 4 * 0.5 / np.sqrt(4000)

    def test_shift_controls_lexicon_overlap(self):
        for shift in (0.0, 0.5, 1.0):
            lex = build_lexicon(DomainShiftSpec(shift=shift))
            for label in (0, 1):
                s, t = set(lex.polarity[(SOURCE, label)]), set(lex.polarity[(TARGET, label)])
                assert len(s - t) == round(shift * 12)
            assert set(lex.polarity[(SOURCE, 0)]).isdisjoint(lex.polarity[(SOURCE, 1)])

    def test_full_shift_source_rule_is_chance_on_exclusive_target(self):
        """Noise-free source labels are a vote over source polarity words, so counting them is
        Bayes-optimal on source; target sentences built from target-exclusive words carry no
        such evidence."""
        spec = DomainShiftSpec(shift=1.0, noise_rate=0.0)
        lex = build_lexicon(spec)
        pos, neg = set(lex.polarity[(SOURCE, 1)]), set(lex.polarity[(SOURCE, 0)])

        def rule(text):
            words = text.split()
            return int(sum(w in pos for w in words) > sum(w in neg for w in words))

        source = generate_examples(spec, SOURCE, 2000, 0)
        assert np.mean([rule(e.text) == e.label for e in source]) == 1.0
        target = generate_examples(spec, TARGET, 2000, 1, exclusive_only=True)
        acc = np.mean([rule(e.text) == e.label for e in target])
        assert abs(acc - 0.5) < 0.05

    def test_no_shift_means_no_transfer_gap(self):
        def gap(shift):
            spec = DomainShiftSpec(shift=shift)
            src = generate_examples(spec, SOURCE, 1500, 0)
            tgt = generate_examples(spec, TARGET, 1500, 1)
            vec = CountVectorizer().fit([e.text for e in src + tgt])
            clf = LogisticRegression(max_iter=2000).fit(vec.transform([e.text for e in src[:1000]]),
                                                        [e.label for e in src[:1000]])
            acc = lambda xs: clf.score(vec.transform([e.text for e in xs]), [e.label for e in xs])  # noqa: E731
            return acc(src[1000:]) - acc(tgt[:500])

        assert abs(gap(0.0)) < 0.05
        assert gap(0.8) > 0.15

    def test_general_corpus_is_unlabeled(self):
        general = generate_general_corpus(DomainShiftSpec(), 20, 0)
        assert all(e.label is None and e.domain == "general" for e in general)
        assert len({e.uid for e in general}) == 20

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            DomainShiftSpec(shift=1.5)


class TestSplits:
    def test_synthetic_pair_counts(self):
        s = generate_synthetic_pair(DomainShiftSpec(), 2000, 500, 100, seed=0)
        assert s.counts() == {"source_train": 1600, "source_val": 400, "target_train": 400,
                              "target_val": 100, "target_test": 100}
        assert all(e.label is not None for e in s.source_train + s.source_val + s.target_test)
        assert all(e.label is None for e in s.target_train + s.target_val)
        assert not {e.uid for e in s.target_test} & s.training_uids()

    def test_membership_fixed_by_seed(self):
        a = make_splits(_labeled(100), _labeled(50, "t", None), _labeled(10, "x"), seed=3)
        b = make_splits(_labeled(100), _labeled(50, "t", None), _labeled(10, "x"), seed=3)
        assert [e.uid for e in a.source_val] == [e.uid for e in b.source_val]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 80), st.integers(2, 80), st.integers(0, 1000))
    def test_stratified(self, n0, n1, seed):
        source = _labeled(n0, "a", 0) + [LabeledExample("x", 1, "b", f"b:{i}") for i in range(n1)]
        s = make_splits(source, _labeled(10, "t"), _labeled(2, "x"), seed=seed)
        train1 = sum(e.label for e in s.source_train)
        val1 = sum(e.label for e in s.source_val)
        # per-class rounding keeps each class count within one of val_frac * class size
        assert abs(val1 - 0.2 * n1) <= 0.5 + 1e-9
        assert abs((len(s.source_val) - val1) - 0.2 * n0) <= 0.5 + 1e-9
        assert train1 + val1 == n1

    def test_overlap_rejected(self):
        with pytest.raises(DataError):
            make_splits(_labeled(4), _labeled(4), _labeled(2, "x"))

    def test_unlabeled_source_rejected(self):
        with pytest.raises(DataError):
            make_splits([LabeledExample("a", None, "s", "s:0")], _labeled(4, "t"), _labeled(2, "x"))

    def test_subsample_nested_and_identity(self):
        s = generate_synthetic_pair(DomainShiftSpec(), 20, 300, 10, seed=0)
        pool = len(s.target_train) + len(s.target_val)
        assert subsample_target(s, pool, 5) is s
        uid = lambda sp: {e.uid for e in sp.target_train + sp.target_val}  # noqa: E731
        small, big = uid(subsample_target(s, 50, 5)), uid(subsample_target(s, 200, 5))
        assert len(small) == 50 and len(big) == 200 and small <= big
        zero = subsample_target(s, 0, 5)
        assert not zero.target_train and not zero.target_val


class TestRecords:
    def test_parse(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\tbooks\tgreat read\n-\tkitchen\tworks fine\n", encoding="utf-8")
        a, b = load_records(p)
        assert (a.label, a.domain, a.text) == (1, "books", "great read")
        assert (b.label, b.domain) == (None, "kitchen")

    def test_crlf_same_as_lf(self, tmp_path):
        lf, crlf = tmp_path / "lf.tsv", tmp_path / "crlf.tsv"
        lf.write_bytes(b"1\tbooks\tgreat read\n0\tbooks\tdull\n")
        crlf.write_bytes(b"1\tbooks\tgreat read\r\n0\tbooks\tdull\r\n")
        strip = lambda xs: [(e.label, e.domain, e.text) for e in xs]  # noqa: E731
        assert strip(load_records(lf)) == strip(load_records(crlf))

    def test_round_trip(self, tmp_path):
        ex = generate_examples(DomainShiftSpec(), SOURCE, 30, 0)
        write_records(ex, tmp_path / "x.tsv")
        back = load_records(tmp_path / "x.tsv")
        assert [(e.label, e.domain, e.text) for e in back] == [(e.label, e.domain, e.text) for e in ex]

    @pytest.mark.parametrize("line", ["2\tbooks\tbad label", "1\tonly two", "1\t\tno domain"])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "bad.tsv"
        p.write_text(line + "\n", encoding="utf-8")
        with pytest.raises(DataError, match="bad.tsv:1"):
            load_records(p)


class TestQuarantine:
    def test_locked_test_set(self, encoded):
        assert len(encoded.target_test) == 60
        encoded.lock()
        with pytest.raises(QuarantineError):
            encoded.target_test
        encoded.unlock()
        assert len(encoded.target_test) == 60

    def test_encoded_labels(self, encoded):
        assert encoded.target_train.labels is None
        assert encoded.source_train.labels is not None
        assert isinstance(encoded, EncodedSplits)
