"""Two-layer tanh value regressor for the A2C baseline.

A ``torch.nn.Module`` fitted by full-batch SGD on ``coef * mean((V - G)^2)``.
Parameters are float64 and initialised from a seeded numpy generator, so a
critic never reads torch's global RNG state.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn, optim

from pathguide_lab.core.models import FloatArray
from pathguide_lab.errors import ParameterError

CRITIC_PARAMETER_NAMES: tuple[str, ...] = ("w1", "b1", "w2", "b2")


class ValueNetwork(nn.Module):
    """V(x) = out(tanh(hidden(x)))."""

    def __init__(self, input_dim: int, hidden_width: int) -> None:
        super().__init__()
        self.hidden = nn.Linear(input_dim, hidden_width, dtype=torch.float64)
        self.out = nn.Linear(hidden_width, 1, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        values: torch.Tensor = self.out(torch.tanh(self.hidden(x)))
        return values.squeeze(-1)


class CriticModel:
    """Value baseline on inputs x = [phi_t, position scale].

    ``parameters()`` exports numpy arrays ``w1`` (input x hidden), ``b1``,
    ``w2`` (hidden) and ``b2`` (1,) for checkpoints.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_width: int = 256,
        loss_coefficient: float = 0.25,
        learning_rate: float = 0.01,
        seed: int = 0,
    ) -> None:
        if input_dim < 1 or hidden_width < 1:
            raise ParameterError(f"critic needs positive sizes, got input={input_dim}, hidden={hidden_width}")
        if not loss_coefficient > 0.0 or not learning_rate > 0.0:
            raise ParameterError("critic loss coefficient and learning rate must be > 0")
        self.input_dim = input_dim
        self.hidden_width = hidden_width
        self.loss_coefficient = float(loss_coefficient)
        self.learning_rate = float(learning_rate)
        self.network = ValueNetwork(input_dim, hidden_width)
        self.optimizer = optim.SGD(self.network.parameters(), lr=self.learning_rate)

        rng = np.random.default_rng(seed)
        self.load_parameters(
            {
                "w1": rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, hidden_width)),
                "b1": np.zeros(hidden_width),
                "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden_width), size=hidden_width),
                "b2": np.zeros(1),
            },
        )

    @classmethod
    def zeros(
        cls,
        input_dim: int,
        hidden_width: int = 256,
        loss_coefficient: float = 0.25,
        learning_rate: float = 0.01,
    ) -> CriticModel:
        """Critic whose prediction is identically zero until trained."""
        critic = cls(input_dim, hidden_width, loss_coefficient, learning_rate)
        parameters = critic.parameters()
        parameters["w1"] = np.zeros_like(parameters["w1"])
        parameters["w2"] = np.zeros_like(parameters["w2"])
        critic.load_parameters(parameters)
        return critic

    @staticmethod
    def _tensor(values: FloatArray) -> torch.Tensor:
        return torch.tensor(np.asarray(values, dtype=np.float64), dtype=torch.float64)

    def _weighted_mse(self, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        return self.loss_coefficient * nn.functional.mse_loss(self.network(inputs), targets)

    def predict(self, inputs: FloatArray) -> FloatArray:
        with torch.no_grad():
            values = self.network(self._tensor(inputs))
        return np.asarray(values.numpy(), dtype=np.float64)

    def loss(self, inputs: FloatArray, targets: FloatArray) -> float:
        """Weighted mean squared error."""
        with torch.no_grad():
            return float(self._weighted_mse(self._tensor(inputs), self._tensor(targets)).item())

    def fit_step(self, inputs: FloatArray, targets: FloatArray) -> float:
        """One full-batch SGD step; returns the loss before the step."""
        if inputs.shape[0] == 0:
            return 0.0
        self.optimizer.zero_grad()
        loss = self._weighted_mse(self._tensor(inputs), self._tensor(targets))
        loss.backward()
        self.optimizer.step()
        return float(loss.item())

    def parameters(self) -> dict[str, FloatArray]:
        network = self.network
        return {
            "w1": network.hidden.weight.detach().numpy().T.copy(),
            "b1": network.hidden.bias.detach().numpy().copy(),
            "w2": network.out.weight.detach().numpy()[0].copy(),
            "b2": network.out.bias.detach().numpy().copy(),
        }

    def load_parameters(self, parameters: dict[str, FloatArray]) -> None:
        shapes = {
            "w1": (self.input_dim, self.hidden_width),
            "b1": (self.hidden_width,),
            "w2": (self.hidden_width,),
            "b2": (1,),
        }
        values: dict[str, FloatArray] = {}
        for name in CRITIC_PARAMETER_NAMES:
            value = np.array(parameters[name], dtype=np.float64)
            if value.shape != shapes[name]:
                raise ParameterError(f"critic parameter {name} has shape {value.shape}, expected {shapes[name]}")
            values[name] = value
        network = self.network
        with torch.no_grad():
            network.hidden.weight.copy_(self._tensor(values["w1"].T))
            network.hidden.bias.copy_(self._tensor(values["b1"]))
            network.out.weight.copy_(self._tensor(values["w2"][None, :]))
            network.out.bias.copy_(self._tensor(values["b2"]))
