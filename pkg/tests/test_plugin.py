import sys

import numpy as np
import pytest

from stepbench.cli import conformance_fixture
from stepbench.errors import PluginError, StepError
from stepbench.predictors import ModelSpec, model_init, model_log_likelihood, model_predict, model_train
from stepbench.predictors.plugin import PluginSession, run_conformance

REF = [sys.executable, "-m", "stepbench.plugins.reference_cv"]


@pytest.fixture(scope="module")
def fixture_samples():
    return conformance_fixture()


def test_reference_plugin_passes_conformance(fixture_samples):
    results = run_conformance(REF, fixture_samples, builtin_kind="constant_velocity")
    failed = [r for r in results if not r[1]]
    assert not failed, failed
    assert [r[0] for r in results][-1] == "builtin_equivalence"


def test_plugin_model_matches_builtin_likelihood(fixture_samples):
    spec = ModelSpec("p", "external_plugin", command=tuple(REF))
    plug = model_train(model_init(spec), fixture_samples)
    cv = model_train(model_init(ModelSpec("cv", "constant_velocity")), fixture_samples)
    s = fixture_samples[0]
    assert model_log_likelihood(plug, s) == model_log_likelihood(cv, s)
    a = model_predict(plug, fixture_samples, 4, 9)[s.sample_id].trajectories
    b = model_predict(cv, fixture_samples, 4, 9)[s.sample_id].trajectories
    np.testing.assert_array_equal(a, b)


def test_wrong_version_is_protocol_error():
    with pytest.raises(PluginError) as e:
        PluginSession(REF + ["--version", "step-plugin/9"], timeout=20)
    assert e.value.code == "PROTOCOL_ERROR"
    with pytest.raises(PluginError) as e:
        PluginSession(REF, version="step-plugin/0", timeout=20)
    assert e.value.code == "PROTOCOL_ERROR"


def test_crash_carries_stderr():
    sess = PluginSession(REF + ["--crash-on", "init"], timeout=20)
    with pytest.raises(PluginError) as e:
        sess.call("init", {"spec": {}})
    assert e.value.code == "CRASH"
    assert "crashing on init" in e.value.stderr
    sess.close()


def test_timeout():
    sess = PluginSession(REF + ["--sleep-on", "init"], timeout=20)
    with pytest.raises(PluginError) as e:
        sess.call("init", {"spec": {}}, timeout=0.5)
    assert e.value.code == "TIMEOUT"
    sess.close()


def test_unknown_op_is_protocol_error():
    sess = PluginSession(REF, timeout=20)
    try:
        with pytest.raises(PluginError) as e:
            sess.call("dance", {})
        assert e.value.code == "PROTOCOL_ERROR"
        assert sess.capabilities["supports_likelihood"] is True
    finally:
        sess.close()


def test_unspawnable_command():
    with pytest.raises(PluginError) as e:
        PluginSession(["/nonexistent/plugin-binary"])
    assert e.value.code == "CRASH"


def test_failed_check_is_reported(fixture_samples):
    results = dict((n, ok) for n, ok, _ in run_conformance(REF + ["--crash-on", "predict"], fixture_samples))
    assert results["handshake"] and results["train"]
    assert not results["predict_shapes"]


def test_plugin_errors_are_step_errors():
    assert issubclass(PluginError, StepError)
