# test_encoders.py
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from data_models import Observation
from encoders import ImageEncoder, TextEncoder, pad_token_sequences, tokenize
from errors import ShapeMismatchError
from tests.helpers import make_observation


def test_image_encoder_shape_and_determinism():
    a, b = ImageEncoder(16, seed=3), ImageEncoder(16, seed=3)
    obs = make_observation(120)
    fa, fb = a.encode(obs), b.encode(obs)
    assert fa.shape == (49, 16)
    assert np.array_equal(fa, fb)
    assert not np.array_equal(fa, ImageEncoder(16, seed=4).encode(obs))


def test_changing_one_patch_changes_one_token():
    encoder = ImageEncoder(16, seed=0)
    image = np.zeros((56, 56, 3), dtype=np.uint8)
    base = encoder.encode(Observation.from_array(image))
    image[8:16, 16:24] = 200
    changed = encoder.encode(Observation.from_array(image))
    differs = np.flatnonzero(np.any(base != changed, axis=1))
    assert differs.tolist() == [1 * 7 + 2]


def test_token_norms_respect_bound():
    encoder = ImageEncoder(16, seed=1)
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(56, 56, 3), dtype=np.uint8)
    norms = np.linalg.norm(encoder.encode(Observation.from_array(image)), axis=1)
    assert np.all(norms <= encoder.token_norm_bound() + 1e-9)


def test_wrong_image_size_is_rejected():
    with pytest.raises(ShapeMismatchError):
        ImageEncoder(16, seed=0).encode(make_observation(size=32))


def test_encoder_parameters_are_frozen():
    encoder = ImageEncoder(16, seed=0)
    with pytest.raises(ValueError):
        encoder.projection[0, 0] = 1.0


_REFERENCE_SPLIT = re.compile(r"[a-z0-9]+")


@settings(max_examples=100)
@given(st.lists(st.sampled_from(["pick", "the", "red", "jar", "Milk", "near", "apple,", "door.", "2nd"]),
                min_size=1, max_size=12))
def test_text_token_count_matches_reference_split(words):
    text = " ".join(words)
    encoded = TextEncoder(16, seed=0).encode(text)
    assert encoded.shape == (len(_REFERENCE_SPLIT.findall(text.lower())), 16)


def test_same_word_same_embedding():
    encoder = TextEncoder(16, seed=0)
    features = encoder.encode("red apple red")
    assert np.array_equal(features[0], features[2])


def test_empty_text_is_rejected():
    with pytest.raises(ValueError):
        TextEncoder(16, seed=0).encode("  ,. ")


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("Pick the Milk, please!") == ["pick", "the", "milk", "please"]


def test_pad_token_sequences_mask():
    encoder = TextEncoder(8, seed=0)
    batch, mask = pad_token_sequences([encoder.encode("pick milk"), encoder.encode("open the door now")])
    assert batch.shape == (2, 4, 8)
    assert mask.sum(axis=1).tolist() == [2, 4]
    assert np.all(batch[0, 2:] == 0)
