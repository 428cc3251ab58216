import numpy as np
import pandas as pd
import pytest

from sckls.errors import DomainError
from sckls.services.dgp import DgpSpec, InputLaw
from sckls.services.simulation import (
    EstimatorName,
    ExperimentConfig,
    ExperimentReport,
    GridKind,
    PowerReport,
    PowerStudyConfig,
    SweepReport,
    apply_overrides,
    bandwidth_sensitivity_sweep,
    experiment_preset,
    power_preset,
    rmse,
    run_power_study,
    run_rmse_experiment,
)


def test_rmse() -> None:
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))


def test_experiment_presets() -> None:
    exp1: ExperimentConfig = experiment_preset("exp1")
    assert exp1.d_list == [2] and exp1.n_list == [100] and exp1.m_list == [400]
    assert EstimatorName.COBB_DOUGLAS in exp1.estimators
    assert experiment_preset("exp4").m_list == [100, 300, 500]
    assert experiment_preset("nonuniform").grid is GridKind.PERCENTILE
    assert experiment_preset("low-snr").dgp.sigma == 1.3
    s_shape: ExperimentConfig = experiment_preset("s-shape", d=1)
    assert s_shape.dgp.d == 1 and s_shape.dgp.input_law is InputLaw.UNIFORM
    assert experiment_preset("contextual").estimators == [EstimatorName.SCKLS_Z]
    sized: ExperimentConfig = experiment_preset("exp1", d=3, n=50, reps=4, seed=9)
    assert (sized.d_list, sized.n_list, sized.reps, sized.seed) == ([3], [50], 4, 9)
    with pytest.raises(DomainError):
        experiment_preset("exp9")


def test_power_presets() -> None:
    shape: PowerStudyConfig = power_preset("shape-test")
    assert len(shape.scenarios) == 18
    assert [s.name for s in shape.scenarios[:3]] == ["A n=100,sigma=0.1", "B n=100,sigma=0.1", "C n=100,sigma=0.1"]
    assert {(s.dgp.n, s.dgp.sigma) for s in shape.scenarios} == {(n, sigma) for n in (100, 300, 500) for sigma in (0.1, 0.2)}
    assert [s.dgp.n for s in power_preset("shape-test", n=500).scenarios] == [500] * 6
    affinity: PowerStudyConfig = power_preset("affinity-test", n=60)
    assert affinity.B == 500 and affinity.reps == 100
    assert affinity.homoscedastic
    assert all(s.dgp.n == 60 for s in affinity.scenarios)
    assert sorted({s.dgp.p for s in affinity.scenarios}) == [0.2, 0.5, 1.0, 2.0, 5.0]
    assert {s.dgp.d for s in affinity.scenarios} == {1, 2}
    assert len(power_preset("affinity-test").scenarios) == 30
    assert [s.name for s in power_preset("affinity-test", n=100, d=1).scenarios] == [
        "p=0.2,d=1,n=100", "p=0.5,d=1,n=100", "p=1,d=1,n=100", "p=2,d=1,n=100", "p=5,d=1,n=100",
    ]
    with pytest.raises(DomainError):
        power_preset("size-test")
    with pytest.raises(DomainError):
        power_preset("shape-test", d=2)


def test_apply_overrides() -> None:
    config = apply_overrides(
        experiment_preset("exp1"),
        {"reps": "2", "dgp.sigma": "0.3", "estimators": "sckls, ll", "m_list": "25,100"},
    )
    assert config.reps == 2
    assert config.dgp.sigma == 0.3
    assert config.estimators == [EstimatorName.SCKLS, EstimatorName.LL]
    assert config.m_list == [25, 100]

    study = apply_overrides(power_preset("affinity-test"), {"dgp.sigma": "0.2", "homoscedastic": "false"})
    assert all(s.dgp.sigma == 0.2 for s in study.scenarios)
    assert not study.homoscedastic

    with pytest.raises(DomainError):
        apply_overrides(experiment_preset("exp1"), {"colour": "red"})
    with pytest.raises(DomainError):
        apply_overrides(experiment_preset("exp1"), {"reps": "0"})


@pytest.fixture(scope="module")
def small_experiment() -> ExperimentConfig:
    return ExperimentConfig(
        name="small",
        dgp=DgpSpec.cobb_douglas(1, 30, sigma=0.3),
        estimators=[EstimatorName.SCKLS, EstimatorName.LL, EstimatorName.CNLS, EstimatorName.COBB_DOUGLAS],
        d_list=[1],
        n_list=[30],
        m_list=[20],
        reps=2,
        seed=4,
    )


def test_rmse_experiment_records(small_experiment: ExperimentConfig) -> None:
    report: ExperimentReport = run_rmse_experiment(small_experiment)
    assert len(report.records) == 8
    assert (report.records["status"] == "ok").all()
    assert not report.incomplete
    summary: pd.DataFrame = report.summary()
    assert sorted(summary["estimator"]) == ["cnls", "cobb_douglas", "ll", "sckls"]
    assert (summary["completed"] == 2).all()
    assert (summary["rmse_obs_mean"] > 0).all()
    assert list(report.ledger["replication"]) == [0, 1]


def test_rmse_experiment_independent_of_threads(small_experiment: ExperimentConfig) -> None:
    serial: ExperimentReport = run_rmse_experiment(small_experiment, threads=1)
    parallel: ExperimentReport = run_rmse_experiment(small_experiment, threads=2)
    pd.testing.assert_frame_equal(serial.records, parallel.records)
    pd.testing.assert_frame_equal(serial.ledger, parallel.ledger)


def test_power_study_small() -> None:
    config: PowerStudyConfig = power_preset("affinity-test", n=40, reps=2, seed=1, d=1)
    config = config.model_copy(update={"B": 20, "scenarios": [s for s in config.scenarios if s.dgp.p in (1.0, 2.0)]})
    report: PowerReport = run_power_study(config)
    assert list(report.table["scenario"]) == ["p=1,d=1,n=40", "p=2,d=1,n=40"]
    assert (report.table["planned"] == 2).all()
    assert len(report.replicates) == 4
    assert report.table["rejection_rate"].dropna().between(0.0, 1.0).all()
    again: PowerReport = run_power_study(config, threads=2)
    pd.testing.assert_frame_equal(report.replicates, again.replicates)


def test_bandwidth_sweep_small() -> None:
    report: SweepReport = bandwidth_sensitivity_sweep(
        DgpSpec.cobb_douglas(1, 40, sigma=0.3), [0.5, 2.0], reps=2, m_target=20, seed=3,
    )
    assert len(report.curves) == 4
    assert list(report.curves["h"].unique()) == ["0.5", "2.0"]
    assert len(report.loocv) == 2
    assert set(report.sckls_better) <= {"0.5", "2.0"}


@pytest.mark.slow
def test_estimation_experiment_recovers_cobb_douglas() -> None:
    config: ExperimentConfig = experiment_preset("exp1", reps=3, seed=1)
    config = apply_overrides(config, {"m_list": "100"})
    summary: pd.DataFrame = run_rmse_experiment(config).summary()
    assert (summary["completed"] == 3).all()
    for estimator in ("sckls", "ll", "cobb_douglas"):
        assert summary.loc[summary["estimator"] == estimator, "rmse_obs_mean"].iloc[0] < 0.7


@pytest.mark.slow
def test_contextual_experiment_runs() -> None:
    config: ExperimentConfig = experiment_preset("contextual", n=120, reps=2, seed=2)
    config = apply_overrides(config, {"m_list": "25"})
    report: ExperimentReport = run_rmse_experiment(config)
    assert (report.records["status"] == "ok").all()
    assert report.records["extra"].str.contains("gamma").all()
