"""Indication normalization: golden example, invariants, idempotence."""

import numpy as np
import pytest

from sei.errors import ValidationError
from sei.indications import DEFAULT_NORMALIZER, NormalizerConfig, normalize_indication


class TestGolden:
    def test_full_example(self):
        raw = "History: 62-year-old Female with cough/fever"
        assert normalize_indication(raw) == "62 woman with cough fever"

    def test_none_passthrough(self):
        assert normalize_indication(None) is None

    def test_only_illegal_chars(self):
        assert normalize_indication("___") is None

    def test_empty_string(self):
        assert normalize_indication("") is None
        assert normalize_indication("   ") is None

    def test_year_old_with_spaces(self):
        assert normalize_indication("62 year old male with pain") == "62 man with pain"

    def test_male_terms(self):
        assert normalize_indication("45M with dyspnea") is not None
        assert normalize_indication("gentleman with cough") == "man with cough"
        assert normalize_indication("59 m, fever") == "59 man, fever"

    def test_single_letter_terms_standalone_only(self):
        assert normalize_indication("mri of chest") == "mri of chest"
        assert normalize_indication("59 f") == "59 woman"

    def test_female_not_split_into_male(self):
        assert normalize_indication("female with fever") == "woman with fever"


class TestConfig:
    def test_overlapping_gender_sets_rejected(self):
        with pytest.raises(ValidationError, match="overlap"):
            NormalizerConfig(male_terms=frozenset({"x"}), female_terms=frozenset({"x"}))

    def test_empty_phrase_rejected(self):
        with pytest.raises(ValidationError):
            NormalizerConfig(invalid_words=("",))

    def test_custom_config(self):
        cfg = NormalizerConfig(
            illegal_chars=frozenset({"#"}),
            invalid_words=("exam:",),
            male_terms=frozenset({"boy"}),
            female_terms=frozenset({"girl"}),
        )
        assert normalize_indication("Exam: girl #2 with boy", cfg) == "woman 2 with man"


def _random_indications(rng, count):
    pieces = (
        "history:", "62-year-old", "female", "male", "cough/fever", "m", "f",
        "@ rest", "year old", "chest_pain", "evaluate", "pneumonia", "woman", "man",
        "lady", "gentleman", "-year-old", "78", "shortness", "of", "breath",
    )
    out = []
    for _ in range(count):
        n = int(rng.integers(1, 8))
        out.append(" ".join(pieces[int(i)] for i in rng.integers(0, len(pieces), size=n)))
    return out


class TestProperties:
    def test_idempotent(self, rng):
        for raw in _random_indications(rng, 300):
            once = normalize_indication(raw)
            assert normalize_indication(once) == once

    def test_no_illegal_chars_or_phrases_survive(self, rng):
        cfg = DEFAULT_NORMALIZER
        for raw in _random_indications(rng, 300):
            out = normalize_indication(raw, cfg)
            if out is None:
                continue
            for ch in cfg.illegal_chars:
                assert ch not in out
            for phrase in cfg.invalid_words:
                assert phrase.lower() not in out

    def test_gender_vocabulary(self, rng):
        cfg = DEFAULT_NORMALIZER
        gendered = {t.lower() for t in cfg.male_terms | cfg.female_terms} - {"man", "woman"}
        for raw in _random_indications(rng, 300):
            out = normalize_indication(raw, cfg)
            if out is None:
                continue
            for token in out.split():
                assert token not in gendered
