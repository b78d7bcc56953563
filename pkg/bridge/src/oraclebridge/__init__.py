"""HTTP bridge between the distillfield engine and guidance denoisers.

``serve`` wraps a real model behind the v1 wire protocol; ``mock_serve``
exposes the engine's synthetic target-image oracle over the same protocol so
the remote path can be integration-tested with exact expected values.
"""

from .service import BridgeServer, make_server, mock_model, serve, mock_serve
from .wire import tensor_from_wire, tensor_to_wire

__all__ = [
    "BridgeServer",
    "make_server",
    "mock_model",
    "mock_serve",
    "serve",
    "tensor_from_wire",
    "tensor_to_wire",
]
