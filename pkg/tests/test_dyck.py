import numpy as np
import pytest

from fsrm import dyck
from fsrm.errors import ConfigError, DatasetParseError, MalformedSequenceError

from helpers import prompt_style_predict


def to_chars(tokens):
    return "".join(dyck.token_to_char(t) for t in tokens)


def labels_to_chars(labels):
    return "".join(dyck.label_to_char(l) for l in labels)


class TestTargetLabels:
    def test_paper_example_position_four(self):
        tokens = dyck.tokens_from_string("({[]")
        labels = dyck.target_labels(tokens)
        assert dyck.label_to_char(labels[3]) == "}"

    def test_empty_stack_star(self):
        tokens = dyck.tokens_from_string("()")
        labels = dyck.target_labels(tokens)
        assert labels_to_chars(labels) == ")*"

    def test_letter_pairs(self):
        tokens = dyck.tokens_from_string("ABba")
        labels = dyck.target_labels(tokens)
        assert labels_to_chars(labels) == "aba*"

    def test_mismatched_closer_reports_position(self):
        tokens = dyck.tokens_from_string("(]")
        with pytest.raises(MalformedSequenceError) as exc:
            dyck.target_labels(tokens)
        assert exc.value.position == 2

    def test_closer_on_empty_stack(self):
        with pytest.raises(MalformedSequenceError) as exc:
            dyck.target_labels(dyck.tokens_from_string(")"))
        assert exc.value.position == 1

    def test_matches_independent_simulator_long_random(self):
        cfg = dyck.DyckConfig(min_len=200, max_len=200, seed=42)
        rng = np.random.default_rng(7)
        sample = dyck.generate_id_string(cfg, rng)
        assert labels_to_chars(sample.labels) == prompt_style_predict(to_chars(sample.tokens))


class TestIdGenerator:
    def test_depth_bound_and_length(self):
        samples = dyck.generate_id_dataset(dyck.DyckConfig(seed=1), 500)
        for s in samples:
            assert 10 <= len(s) <= 40
            assert max(dyck.stack_depths(s.tokens)) <= 5
            assert min(dyck.stack_depths(s.tokens)) >= 0

    def test_independent_validation_sampled(self):
        samples = dyck.generate_id_dataset(dyck.DyckConfig(seed=2), 2000)
        for s in samples:
            assert labels_to_chars(s.labels) == prompt_style_predict(to_chars(s.tokens))

    def test_star_never_in_inputs(self):
        samples = dyck.generate_id_dataset(dyck.DyckConfig(seed=3), 200)
        for s in samples:
            assert all(0 <= t < dyck.VOCAB_IN for t in s.tokens)

    def test_seeded_determinism(self, tmp_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        dyck.write_dataset(dyck.generate_id_dataset(dyck.DyckConfig(seed=9), 50), a)
        dyck.write_dataset(dyck.generate_id_dataset(dyck.DyckConfig(seed=9), 50), b)
        assert a.read_bytes() == b.read_bytes()
        c = tmp_path / "c.jsonl"
        dyck.write_dataset(dyck.generate_id_dataset(dyck.DyckConfig(seed=10), 50), c)
        assert a.read_bytes() != c.read_bytes()


class TestRegularRuns:
    def test_one_regular_pattern_family(self):
        rng = np.random.default_rng(11)
        s = dyck.generate_regular_run(1, 41, 5, rng)
        depths = dyck.stack_depths(s.tokens)
        # the first closer ends the first cycle; the prefix is one shorter
        first_closer = next(i for i, t in enumerate(s.tokens) if not dyck.is_opener(t))
        base = first_closer - 1
        assert base >= 1
        tail = depths[base:]
        assert all(d in (base, base + 1) for d in tail)

    def test_prefix_depth_one_labels(self):
        # with a depth-1 prefix, every position where depth returns to 1
        # must be labeled with the prefix closer (long-range retention)
        rng = np.random.default_rng(12)
        for _ in range(20):
            s = dyck.generate_regular_run(1, 60, 2, rng)  # m=2 forces prefix len 1
            prefix_closer = s.tokens[0] + dyck.K_TYPES - 0
            depths = dyck.stack_depths(s.tokens)
            for pos in range(1, len(s)):
                if depths[pos] == 1:
                    assert s.labels[pos] == s.tokens[0]

    def test_two_regular_structure(self):
        rng = np.random.default_rng(13)
        s = dyck.generate_regular_run(2, 50, 5, rng)
        depths = dyck.stack_depths(s.tokens)
        assert max(depths) <= 5
        # cycles climb two then descend two above the prefix depth
        first_closer = next(i for i, t in enumerate(s.tokens) if not dyck.is_opener(t))
        base = first_closer - 2  # prefix length
        assert base >= 1
        tail = depths[base:]
        assert set(tail) <= {base, base + 1, base + 2}

    def test_labels_match_independent_simulator(self):
        rng = np.random.default_rng(14)
        for n in (1, 2, 4):
            s = dyck.generate_regular_run(n, 200, 5, rng)
            assert labels_to_chars(s.labels) == prompt_style_predict(to_chars(s.tokens))

    def test_n_out_of_range(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ConfigError):
            dyck.generate_regular_run(5, 40, 5, rng)
        with pytest.raises(ConfigError):
            dyck.generate_regular_run(0, 40, 5, rng)


class TestDatasetIO:
    def test_roundtrip_identity(self, tmp_path):
        samples = dyck.generate_id_dataset(dyck.DyckConfig(seed=4), 100)
        path = tmp_path / "d.jsonl"
        dyck.write_dataset(samples, path)
        back = dyck.read_dataset(path)
        assert len(back) == len(samples)
        for a, b in zip(samples, back):
            assert a.tokens == b.tokens
            assert a.labels == b.labels
            assert a.meta == b.meta

    def test_truncated_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = dyck.generate_id_dataset(dyck.DyckConfig(seed=5), 2)
        dyck.write_dataset(good, path)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write('{"tokens":[1,2],"labels":[1]')
            fh.write("\n")
        with pytest.raises(DatasetParseError) as exc:
            dyck.read_dataset(path)
        assert exc.value.line_number == 3

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert dyck.read_dataset(path) == []

    def test_label_count_mismatch(self, tmp_path):
        path = tmp_path / "mismatch.jsonl"
        path.write_text('{"tokens":[1,2],"labels":[1],"meta":{"kind":"id","n":null,"seed":0}}\n')
        with pytest.raises(DatasetParseError):
            dyck.read_dataset(path)


class TestAlphabet:
    def test_bijection(self):
        for i in range(dyck.K_TYPES):
            o = dyck.opener_id(i)
            c = dyck.closer_id(i)
            assert dyck.char_to_token(dyck.token_to_char(o)) == o
            assert dyck.char_to_token(dyck.token_to_char(c)) == c
        assert dyck.VOCAB_IN == 60
        assert dyck.VOCAB_OUT == 31

    def test_star_is_output_only(self):
        with pytest.raises(ConfigError):
            dyck.char_to_token("*")
