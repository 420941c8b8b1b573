import time

import numpy as np
import pytest

from motion_synth import utils


def slow_square(x, delay):
    time.sleep(delay)
    return x * x


def test_map_concurrent_keeps_input_order():
    inputs = {k: (k, 0.01 * (5 - k)) for k in range(5)}
    output, errors = utils.map_concurrent(slow_square, inputs, max_workers=5, show_progress=False)
    assert list(output) == list(range(5))
    assert list(output.values()) == [0, 1, 4, 9, 16]
    assert errors == {}


def fails_on_three(x):
    if x == 3:
        raise RuntimeError("three")
    return x


def test_map_concurrent_collects_errors():
    output, errors = utils.map_concurrent(
        fails_on_three, {k: (k,) for k in range(5)}, show_progress=False)
    assert list(output) == [0, 1, 2, 4]
    assert list(errors) == [3]
    assert isinstance(errors[3], RuntimeError)


def test_map_concurrent_can_raise():
    with pytest.raises(RuntimeError):
        utils.map_concurrent(
            fails_on_three, {k: (k,) for k in range(5)}, show_progress=False, raise_on_err=True)


def test_format_vector():
    assert utils.format_vector([0, 0.5, 1]) == "[0.000, 0.500, 1.000]"
    assert utils.format_vector([1.25], precision=1) == "[1.2]"


def test_collapse_whitespace():
    assert utils.collapse_whitespace("  a\n\tb   c ") == "a b c"


def test_fingerprint_is_stable():
    assert utils.fingerprint({'a': 1, 'b': [1, 2]}) == utils.fingerprint({'b': [1, 2], 'a': 1})
    assert utils.fingerprint(np.arange(3.0)) == utils.fingerprint(np.arange(3.0))
    assert utils.fingerprint({'a': 1}) != utils.fingerprint({'a': 2})
    assert len(utils.fingerprint("x")) == 16
