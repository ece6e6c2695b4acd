import struct

import numpy as np
import pytest

from src.exceptions import ContainerError
from src.ml.diffcomp import ParamBundle
from src.models.barrier import BarrierModel, NonSeqBarrierModel
from src.schemas.dynamics import DynamicsKind
from src.services.container import (
    FORMAT_VERSION,
    MAGIC,
    ModelContainer,
    decode_container,
    encode_container,
    load_container,
    load_model,
    save_model,
)
from src.services.ego_dynamics import DynamicsTrainConfig, fit_dynamics, generate_transitions


def test_header_layout():
    data = encode_container(ModelContainer({"model": "x"}))
    assert data[:4] == MAGIC
    version, length = struct.unpack("<HI", data[4:10])
    assert version == FORMAT_VERSION
    assert data[10:10 + length] == b'{"model":"x"}'
    assert data[10 + length:] == struct.pack("<I", 0)


def test_zero_tensor_container_roundtrips():
    container = decode_container(encode_container(ModelContainer({"model": "empty", "k": 3})))
    assert container.descriptor == {"model": "empty", "k": 3}
    assert len(container.tensors) == 0


def test_encoding_is_byte_stable(si_model):
    data = encode_container(ModelContainer(si_model.descriptor(), si_model.tensors()))
    again = decode_container(data)
    assert encode_container(again) == data
    assert again.tensors.names() == si_model.params.names()


def test_bad_magic_is_rejected():
    data = bytearray(encode_container(ModelContainer({"model": "x"})))
    data[:4] = b"NOPE"
    with pytest.raises(ContainerError, match="magic"):
        decode_container(bytes(data))


def test_version_mismatch_names_both_versions():
    data = bytearray(encode_container(ModelContainer({"model": "x"})))
    data[4:6] = struct.pack("<H", FORMAT_VERSION + 1)
    with pytest.raises(ContainerError) as err:
        decode_container(bytes(data))
    assert str(FORMAT_VERSION + 1) in str(err.value)
    assert str(FORMAT_VERSION) in str(err.value)


@pytest.mark.parametrize("cut", [3, 9, 14, -1])
def test_truncation_is_rejected(cut):
    bundle = ParamBundle([("w", np.ones((2, 2)))])
    data = encode_container(ModelContainer({"model": "x"}, bundle))
    with pytest.raises(ContainerError):
        decode_container(data[:cut])


def test_trailing_bytes_are_rejected():
    data = encode_container(ModelContainer({"model": "x"}))
    with pytest.raises(ContainerError, match="trailing"):
        decode_container(data + b"\x00")


def test_unreadable_descriptor():
    text = b"{not json"
    data = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(text)) + text + struct.pack("<I", 0)
    with pytest.raises(ContainerError):
        decode_container(data)


def test_barrier_model_roundtrip(tmp_path, si_model, rng):
    path = save_model(tmp_path / "m.sncb", si_model)
    loaded = load_model(path)
    assert isinstance(loaded, BarrierModel)
    assert loaded.descriptor() == si_model.descriptor()
    x, h = rng.normal(size=(5, 2)), rng.normal(size=(5, 3, 4))
    np.testing.assert_allclose(loaded.values(x, h), si_model.values(x, h), rtol=1e-4, atol=1e-5)


def test_nonseq_model_roundtrip(tmp_path, nonseq_model, rng):
    loaded = load_model(save_model(tmp_path / "n.sncb", nonseq_model))
    assert isinstance(loaded, NonSeqBarrierModel)
    x, sets = rng.normal(size=(3, 2)), rng.normal(size=(3, 4, 4))
    np.testing.assert_allclose(loaded.values(x, sets), nonseq_model.values(x, sets), rtol=1e-4, atol=1e-5)


def test_learned_dynamics_roundtrip(tmp_path, rng):
    data = generate_transitions(DynamicsKind.DOUBLE_INTEGRATOR, 200, seed=0)
    model, _ = fit_dynamics(data, DynamicsTrainConfig(hidden=(8,), iterations=5, min_transitions=10))
    loaded = load_model(save_model(tmp_path / "d.sncb", model))
    states, controls = data.states[:4], data.controls[:4]
    np.testing.assert_allclose(loaded.step(states, controls), model.step(states, controls), rtol=1e-4, atol=1e-5)


def test_unknown_model_type(tmp_path):
    path = tmp_path / "u.sncb"
    path.write_bytes(encode_container(ModelContainer({"model": "mystery"})))
    with pytest.raises(ContainerError, match="mystery"):
        load_model(path)


def test_descriptor_tensor_mismatch(tmp_path, si_model):
    path = tmp_path / "bad.sncb"
    path.write_bytes(encode_container(ModelContainer({"model": "sncbf"}, si_model.tensors())))
    with pytest.raises(ContainerError):
        load_model(path)


def test_missing_file(tmp_path):
    with pytest.raises(ContainerError):
        load_container(tmp_path / "absent.sncb")
