"""Codec round trips and payload validation, against the engine's client codec."""

import base64

import pytest
import torch

from distillfield.remote import tensor_to_wire as client_encode
from distillfield.remote import wire_to_tensor as client_decode
from oraclebridge.wire import (
    WireError,
    check_envelope,
    conditioning_fields,
    tensor_from_wire,
    tensor_to_wire,
)


class TestTensorRoundTrip:
    def test_f32_payloads_survive_bitwise(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            shape = tuple(int(torch.randint(1, 7, (1,), generator=g)) for _ in range(3))
            t = torch.randn(shape, generator=g) * 10 ** int(torch.randint(-6, 7, (1,), generator=g))
            back = tensor_from_wire(tensor_to_wire(t))
            assert back.dtype == torch.float32
            assert torch.equal(back.view(torch.int32), t.view(torch.int32))

    def test_special_values_survive(self):
        t = torch.tensor([0.0, -0.0, 1e-45, -1e-45, 3.4e38, float("inf"), float("-inf")])
        back = tensor_from_wire(tensor_to_wire(t))
        assert torch.equal(back.view(torch.int32), t.view(torch.int32))

    def test_nan_payload_bits_survive(self):
        t = torch.tensor([float("nan")])
        back = tensor_from_wire(tensor_to_wire(t))
        assert torch.equal(back.view(torch.int32), t.view(torch.int32))

    def test_scalar_shape(self):
        t = torch.tensor(2.5)
        back = tensor_from_wire(tensor_to_wire(t))
        assert back.shape == () and float(back) == 2.5

    def test_f64_input_is_quantized_to_f32(self):
        t = torch.tensor([1.0 + 1e-12], dtype=torch.float64)
        back = tensor_from_wire(tensor_to_wire(t))
        assert back.dtype == torch.float32
        assert float(back) == float(t.float())

    def test_noncontiguous_input(self):
        t = torch.arange(12.0).reshape(3, 4).t()
        back = tensor_from_wire(tensor_to_wire(t))
        assert torch.equal(back, t.contiguous())


class TestCrossCodec:
    """Server codec and engine client codec must agree byte for byte."""

    def test_server_decodes_client_encoding(self):
        g = torch.Generator().manual_seed(1)
        t = torch.randn(5, 7, 3, generator=g)
        assert torch.equal(tensor_from_wire(client_encode(t)).view(torch.int32), t.view(torch.int32))

    def test_client_decodes_server_encoding(self):
        g = torch.Generator().manual_seed(2)
        t = torch.randn(4, 4, 3, generator=g)
        assert torch.equal(client_decode(tensor_to_wire(t)).view(torch.int32), t.view(torch.int32))

    def test_identical_wire_bytes(self):
        g = torch.Generator().manual_seed(3)
        t = torch.randn(6, 2, generator=g)
        assert tensor_to_wire(t) == client_encode(t)


class TestMalformedPayloads:
    def test_missing_fields(self):
        with pytest.raises(WireError):
            tensor_from_wire({"data": base64.b64encode(b"\x00" * 4).decode()})
        with pytest.raises(WireError):
            tensor_from_wire({"shape": [1]})
        with pytest.raises(WireError):
            tensor_from_wire("not an object")

    def test_shape_product_mismatch(self):
        payload = tensor_to_wire(torch.zeros(4))
        payload["shape"] = [5]
        with pytest.raises(WireError, match="needs 5"):
            tensor_from_wire(payload)

    def test_ragged_byte_count(self):
        payload = {"data": base64.b64encode(b"\x00" * 6).decode(), "shape": [1]}
        with pytest.raises(WireError, match="whole number"):
            tensor_from_wire(payload)

    def test_invalid_base64(self):
        with pytest.raises(WireError):
            tensor_from_wire({"data": "!!!not base64!!!", "shape": [1]})

    def test_negative_dimension(self):
        payload = tensor_to_wire(torch.zeros(4))
        payload["shape"] = [-4]
        with pytest.raises(WireError, match="negative"):
            tensor_from_wire(payload)


class TestEnvelope:
    def test_version_and_op_checked(self):
        check_envelope({"version": "v1", "op": "encode"}, "encode")
        with pytest.raises(WireError, match="version"):
            check_envelope({"version": "v2", "op": "encode"}, "encode")
        with pytest.raises(WireError, match="does not match"):
            check_envelope({"version": "v1", "op": "decode"}, "encode")
        with pytest.raises(WireError):
            check_envelope([], "encode")

    def test_conditioning_parsing(self):
        cam, prompt = conditioning_fields(
            {"conditioning": {"camera": {"drho": 0.1, "dtheta": 0, "dphi": -1}, "prompt": "a cat"}}
        )
        assert cam == {"drho": 0.1, "dtheta": 0.0, "dphi": -1.0}
        assert prompt == "a cat"
        assert conditioning_fields({}) == (None, None)
        assert conditioning_fields({"conditioning": None}) == (None, None)
        with pytest.raises(WireError, match="drho"):
            conditioning_fields({"conditioning": {"camera": {"drho": 0.1}}})
        with pytest.raises(WireError, match="prompt"):
            conditioning_fields({"conditioning": {"prompt": 7}})
