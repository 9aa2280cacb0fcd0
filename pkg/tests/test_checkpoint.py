import pytest
import torch

from ddeseg.checkpoint import load_checkpoint, save_checkpoint
from ddeseg.errors import ContractError, DataFormatError
from ddeseg.gradsuite import micro_config
from ddeseg.model import DDESegModel


def _model():
    torch.manual_seed(0)
    return DDESegModel(micro_config())


def test_roundtrip_preserves_state_and_config(tmp_path):
    model = _model()
    path = tmp_path / "model.ddck"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for (na, a), (nb, b) in zip(
        model.state_dict().items(), loaded.state_dict().items()
    ):
        assert na == nb
        assert torch.equal(a, b)


def test_roundtrip_is_bit_stable(tmp_path):
    model = _model()
    p1, p2 = tmp_path / "a.ddck", tmp_path / "b.ddck"
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_crc_detects_corruption(tmp_path):
    model = _model()
    path = tmp_path / "model.ddck"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ddck"
    path.write_bytes(b"WRONG!!!" + b"\x00" * 32)
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    model = _model()
    path = tmp_path / "model.ddck"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)


def test_config_json_roundtrip():
    from ddeseg.config import RunConfig

    cfg = micro_config()
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    with pytest.raises(ContractError):
        RunConfig.from_json('{"bogus_key": 1}')
