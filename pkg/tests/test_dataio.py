import json
import math
import struct

import numpy as np
import pytest

from dpiadmm import dataio
from dpiadmm.admm import FeasibleBox
from dpiadmm.federation import Algorithm, MetricsRecord
from dpiadmm.mechanisms import Mechanism
from dpiadmm.model import AgentData, one_hot

from conftest import MNIST_DIR, mnist_available


def idx_images(pixels: np.ndarray) -> bytes:
    n, r, c = pixels.shape
    return struct.pack(">IIII", 0x803, n, r, c) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x801, labels.size) + labels.tobytes()


# ----------------------------------------------------------------- IDX

def test_parse_minimal_image_file():
    out = dataio.parse_idx_images(idx_images(np.array([[[0, 255], [0, 255]]])))
    np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0, 1.0]])


def test_parse_images_row_major(rng):
    pix = rng.integers(0, 256, size=(3, 4, 5))
    out = dataio.parse_idx_images(idx_images(pix))
    np.testing.assert_array_equal(out, pix.reshape(3, 20) / 255.0)


def test_parse_images_truncated_payload():
    data = idx_images(np.zeros((2, 3, 3)))[:-4]
    with pytest.raises(dataio.ParseError, match="expected 18 pixel bytes, got 14"):
        dataio.parse_idx_images(data)


def test_parse_images_bad_magic_and_short_header():
    with pytest.raises(dataio.ParseError, match="magic"):
        dataio.parse_idx_images(idx_labels([1, 2]) + bytes(8))
    with pytest.raises(dataio.ParseError, match="header truncated"):
        dataio.parse_idx_images(b"\x00\x00\x08\x03\x00")


def test_parse_labels():
    np.testing.assert_array_equal(dataio.parse_idx_labels(idx_labels([0, 1, 2])), [0, 1, 2])
    with pytest.raises(dataio.ParseError):
        dataio.parse_idx_labels(idx_images(np.zeros((1, 1, 1))))
    with pytest.raises(dataio.ParseError, match="truncated"):
        dataio.parse_idx_labels(idx_labels([0, 1, 2])[:-1])


def test_parse_is_deterministic(rng):
    data = idx_images(rng.integers(0, 256, size=(4, 2, 2)))
    assert dataio.parse_idx_images(data).tobytes() == dataio.parse_idx_images(data).tobytes()


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_mnist_train_files():
    x = dataio.load_idx_images(MNIST_DIR / "train-images-idx3-ubyte")
    y = dataio.load_idx_labels(MNIST_DIR / "train-labels-idx1-ubyte")
    assert x.shape == (60000, 784)
    assert y.shape == (60000,) and set(np.unique(y)) == set(range(10))
    assert x.min() == 0.0 and x.max() == 1.0


# ----------------------------------------------------------------- agent tables

def test_load_agent_table_one_hot(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1, 0.5, 0.5\n0, 1.0, 0.0\n")
    d = dataio.load_agent_table(p, 2)
    np.testing.assert_array_equal(d.labels, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(d.features, [[0.5, 0.5], [1.0, 0.0]])


def test_load_empty_agent_table(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    d = dataio.load_agent_table(p, 3, num_features=4)
    assert d.num_samples == 0 and d.features.shape == (0, 4)


@pytest.mark.parametrize("text, where", [("1,2,3\n0,1\n", ":2:"), ("1,2\nx,1\n", ":2:"), ("0.5,1\n", ":1:")])
def test_agent_table_errors_name_line(tmp_path, text, where):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(dataio.ParseError, match=where):
        dataio.load_agent_table(p, 3)


def test_agent_table_class_out_of_range(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("3,1.0\n")
    with pytest.raises(dataio.ParseError):
        dataio.load_agent_table(p, 3)


def test_agent_table_round_trip(tmp_path, rng):
    d = AgentData(np.round(rng.normal(size=(5, 3)), 6), one_hot(rng.integers(0, 4, size=5), 4))
    dataio.write_agent_table(d, tmp_path / "t.csv")
    back = dataio.load_agent_table(tmp_path / "t.csv", 4)
    np.testing.assert_array_equal(back.labels, d.labels)
    np.testing.assert_allclose(back.features, d.features, rtol=1e-10)


# ----------------------------------------------------------------- metrics

def test_metrics_empty_and_single(tmp_path):
    dataio.write_metrics([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(dataio.METRICS_HEADER) + "\n"
    rec = MetricsRecord(3, 0.125, 0.5, 1e-3, 2.3, 7.0, 0.25)
    dataio.write_metrics([rec], tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["t,test_error,avg_noise_mag,consensus_violation,objective,rho_t,prox_t",
                     "3,0.125,0.5,0.001,2.3,7,0.25"]


def test_metrics_round_trip(tmp_path, rng):
    recs = [MetricsRecord(t, *map(float, rng.random(6))) for t in range(1, 20, 3)]
    dataio.write_metrics(recs, tmp_path / "m.csv")
    back = dataio.read_metrics(tmp_path / "m.csv")
    assert [r.t for r in back] == [r.t for r in recs]
    for a, b in zip(recs, back):
        for f in dataio.METRICS_HEADER[1:]:
            assert getattr(b, f) == pytest.approx(getattr(a, f), rel=1e-9)


def test_metrics_nan_written_and_read(tmp_path):
    dataio.write_metrics([MetricsRecord(1, math.nan, 0, 0, 1, 1, 1)], tmp_path / "m.csv")
    assert math.isnan(dataio.read_metrics(tmp_path / "m.csv")[0].test_error)


def test_read_metrics_rejects_foreign_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n")
    with pytest.raises(dataio.ParseError):
        dataio.read_metrics(tmp_path / "m.csv")


# ----------------------------------------------------------------- config

def test_minimal_config_uses_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("algorithm = ObjP  # proximal\nT = 50\neps_bar = 0.5\n")
    cfg = dataio.load_config(p)
    assert cfg.algorithm is Algorithm.OBJP and cfg.T == 50 and cfg.privacy.eps_bar == 0.5
    assert cfg.privacy.mechanism is Mechanism.LAPLACE_OBJECTIVE
    assert cfg.box == FeasibleBox(100.0) and cfg.log_every == 100 and cfg.P == 10


def test_mnist_experiment_constants_parse(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("algorithm = OutP\nrho.c1 = 2\nrho.c2 = 5\nrho.Tc = 1e4\nbeta = 1e-6\ndelta_bar = 1e-6\nT = 2e4\n")
    cfg = dataio.load_config(p)
    r = cfg.schedules.rho
    assert (r.c1, r.c2, r.Tc, r.cap) == (2.0, 5.0, 10_000, 1e9)
    assert cfg.beta == 1e-6 and cfg.privacy.delta_bar == 1e-6 and cfg.T == 20_000
    assert cfg.privacy.mechanism is Mechanism.GAUSSIAN_OUTPUT


@pytest.mark.parametrize("key, value", [("eps_bar", "-1"), ("T", "1.5"), ("T", "ten"), ("box.B", "-3"),
                                        ("mechanism", "gaussian_output"), ("algorithm", "SGD"),
                                        ("bias_column", "maybe"), ("rho.Tc", "0"), ("dtype", "float16")])
def test_bad_values_name_the_key(key, value):
    with pytest.raises(dataio.ConfigError, match=key.replace(".", r"\.")):
        dataio.config_from_mapping({key: value})


def test_unknown_key_rejected():
    with pytest.raises(dataio.ConfigError, match="rho.c3"):
        dataio.config_from_mapping({"rho.c3": "1"})


def test_malformed_line_rejected():
    with pytest.raises(dataio.ConfigError, match="line 2"):
        dataio.parse_config_text("T = 1\nnonsense\n")


def test_overrides_take_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("eps_bar = 1\nseed = 3\n")
    cfg = dataio.load_config(p, {"eps_bar": "0.1"})
    assert cfg.privacy.eps_bar == 0.1 and cfg.seed == 3


def test_unbounded_box_keyword():
    assert dataio.config_from_mapping({"box.B": "none"}).box.bound is None


def test_config_mapping_round_trip(tmp_path):
    cfg = dataio.config_from_mapping({"algorithm": "OutP", "eps_bar": "0.05", "T": "123", "sigma_decay": "0.5",
                                      "box.B": "inf", "bias_column": "true", "num_classes": "10"})
    again = dataio.config_from_mapping(dataio.config_to_mapping(cfg))
    assert again == cfg
    (tmp_path / "run.json").write_text(json.dumps({"config": dataio.config_to_mapping(cfg), "seed": 0}))
    assert dataio.load_config(tmp_path / "run.json") == cfg


# ----------------------------------------------------------------- problem assembly

def write_idx_problem(tmp_path, rng, n=20, test_n=8):
    pix = rng.integers(0, 256, size=(n, 2, 2))
    lab = rng.integers(0, 3, size=n)
    (tmp_path / "tr-img").write_bytes(idx_images(pix))
    (tmp_path / "tr-lab").write_bytes(idx_labels(lab))
    (tmp_path / "te-img").write_bytes(idx_images(rng.integers(0, 256, size=(test_n, 2, 2))))
    (tmp_path / "te-lab").write_bytes(idx_labels(rng.integers(0, 3, size=test_n)))
    return {"train.images": str(tmp_path / "tr-img"), "train.labels": str(tmp_path / "tr-lab"),
            "test.images": str(tmp_path / "te-img"), "test.labels": str(tmp_path / "te-lab")}


def test_load_problem_from_idx(tmp_path, rng):
    paths = write_idx_problem(tmp_path, rng)
    cfg = dataio.config_from_mapping({**paths, "P": "3", "bias_column": "true"})
    agents, test = dataio.load_problem(cfg)
    assert [a.num_samples for a in agents] == [7, 7, 6]
    assert agents[0].num_features == 5 and np.all(agents[0].features[:, -1] == 1)
    assert test.num_samples == 8 and test.num_features == 5


def test_load_problem_partition_seed_is_independent_of_noise_seed(tmp_path, rng):
    paths = write_idx_problem(tmp_path, rng)
    a, _ = dataio.load_problem(dataio.config_from_mapping({**paths, "P": "2", "seed": "1"}))
    b, _ = dataio.load_problem(dataio.config_from_mapping({**paths, "P": "2", "seed": "2"}))
    np.testing.assert_array_equal(a[0].features, b[0].features)


def test_load_problem_from_agent_dir(tmp_path):
    d = tmp_path / "agents"
    d.mkdir()
    (d / "a0.csv").write_text("0,1,2\n2,3,4\n")
    (d / "a1.csv").write_text("1,0,1\n")
    (d / "a2.csv").write_text("")
    cfg = dataio.config_from_mapping({"agents.dir": str(d)})
    agents, test = dataio.load_problem(cfg)
    assert [a.num_samples for a in agents] == [2, 1, 0]
    assert agents[0].num_classes == 3 and agents[2].features.shape == (0, 2)
    assert test is None


def test_load_problem_agent_dir_errors(tmp_path):
    d = tmp_path / "agents"
    d.mkdir()
    with pytest.raises(dataio.ParseError):
        dataio.load_problem(dataio.config_from_mapping({"agents.dir": str(d)}))
    (d / "a0.csv").write_text("0,1,2\n")
    (d / "a1.csv").write_text("1,0\n")
    with pytest.raises(dataio.ParseError):
        dataio.load_problem(dataio.config_from_mapping({"agents.dir": str(d)}))


def test_load_problem_needs_some_training_data():
    with pytest.raises(dataio.ConfigError):
        dataio.load_problem(dataio.config_from_mapping({}))


def test_label_exceeding_num_classes(tmp_path, rng):
    paths = write_idx_problem(tmp_path, rng)
    with pytest.raises(dataio.ParseError):
        dataio.load_problem(dataio.config_from_mapping({**paths, "P": "2", "num_classes": "2"}))
