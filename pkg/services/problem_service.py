"""
Problem service for the neatpad workbench.
Handles the evaluation problems a run can optimize: XOR, function fitting and
an in-repo cart-pole balancing task.

A problem evaluates one genome through an `act` closure mapping a
(batch, inputs) matrix to a (batch, outputs) matrix, and a whole population
through the batched inference kernel. Both paths give identical fitness.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Type

import numpy as np
import pandas as pd

from models.data_models import NeatConfig
from models.errors import ConfigError, EmptyDataset, NonFiniteState, ShapeMismatch
from services.encoding_service import AttributeSchema, GenomeTensors
from services.inference_service import (
    DEFAULT_SCHEMA,
    TransformedBatch,
    batch_forward,
    propagate,
    stack_networks,
    transform,
)
from utils.rng import RngKey

Act = Callable[[np.ndarray], np.ndarray]


def genome_act(g: GenomeTensors, schema: AttributeSchema = DEFAULT_SCHEMA) -> Act:
    """Forward closure for one genome, transformed once."""
    batch = stack_networks([transform(g)])
    return lambda x: batch_forward(batch, np.atleast_2d(x), schema)[0]


def _outputs(act: Act, inputs: np.ndarray, num_outputs: int) -> np.ndarray:
    out = np.asarray(act(inputs), dtype=np.float64)
    if out.shape != (inputs.shape[0], num_outputs):
        raise ShapeMismatch(f"network returned shape {out.shape}, expected {(inputs.shape[0], num_outputs)}")
    return out


class BaseProblem(ABC):
    """
    Contract every problem implements.

    Subclasses set `name`, `output_activation`, the input/output widths, and
    implement evaluate(); evaluate_population() may be overridden with a
    vectorized equivalent.
    """
    name: str = ""
    output_activation: str = "identity"
    # False when evaluate keeps state between calls; such problems run on one thread
    pure: bool = True

    @property
    @abstractmethod
    def input_shape(self) -> int:
        ...

    @property
    @abstractmethod
    def output_shape(self) -> int:
        ...

    def setup(self, key: RngKey) -> None:
        """Prepare problem state once per run. Default: nothing to do."""

    @abstractmethod
    def evaluate(self, key: RngKey, act: Act) -> float:
        ...

    def evaluate_population(
        self,
        keys: Sequence[RngKey],
        batch: TransformedBatch,
        schema: AttributeSchema = DEFAULT_SCHEMA,
        workers: int = 1,
    ) -> np.ndarray:
        """Fitness of every stacked network; slot i is evaluated with keys[i]."""
        fitness = np.empty(len(batch))
        for index in range(len(batch)):
            single = batch.slice(index, index + 1)
            fitness[index] = self.evaluate(keys[index], lambda x: batch_forward(single, np.atleast_2d(x), schema)[0])
        return fitness

    def show(self, key: RngKey, act: Act) -> str:
        """Human-readable account of how a network behaves on this problem."""
        return f"{self.name}: fitness {self.evaluate(key, act):.6f}"


# XOR

XOR_INPUTS = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
])
XOR_TARGETS = np.array([[0.0], [1.0], [1.0], [0.0]])


def _xor_fitness(outputs: np.ndarray) -> np.ndarray:
    clipped = np.clip(outputs, 0.0, 1.0)
    return 4.0 - ((XOR_TARGETS - clipped) ** 2).sum(axis=(-2, -1))


def eval_xor(act: Act) -> float:
    """
    XOR with a constant 1.0 third input.

    Returns:
        4 minus the summed squared error over the four cases, outputs clipped to [0, 1]
    """
    return float(_xor_fitness(_outputs(act, XOR_INPUTS, 1)))


class XorProblem(BaseProblem):
    name = "xor"
    output_activation = "sigmoid"

    @property
    def input_shape(self) -> int:
        return 3

    @property
    def output_shape(self) -> int:
        return 1

    def evaluate(self, key: RngKey, act: Act) -> float:
        return eval_xor(act)

    def evaluate_population(self, keys, batch, schema=DEFAULT_SCHEMA, workers=1) -> np.ndarray:
        return _xor_fitness(batch_forward(batch, XOR_INPUTS, schema, workers))

    def show(self, key: RngKey, act: Act) -> str:
        outputs = _outputs(act, XOR_INPUTS, 1)
        lines = [f"{'x1':>4} {'x2':>4} {'target':>7} {'output':>10}"]
        for row, target, out in zip(XOR_INPUTS, XOR_TARGETS, outputs):
            lines.append(f"{row[0]:>4.0f} {row[1]:>4.0f} {target[0]:>7.0f} {out[0]:>10.6f}")
        lines.append(f"fitness {eval_xor(act):.6f}")
        return "\n".join(lines)


# Function fitting

def default_dataset() -> Tuple[np.ndarray, np.ndarray]:
    """y = x^2 sampled at 20 evenly spaced points in [-1, 1]."""
    x = np.linspace(-1.0, 1.0, 20).reshape(-1, 1)
    return x, x ** 2


def load_dataset(path: str, num_outputs: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Load a comma-separated dataset with a header row.

    Args:
        path: CSV file; the last `num_outputs` columns are targets
        num_outputs: Number of target columns

    Returns:
        Tuple of (X, y) float matrices

    Raises:
        EmptyDataset: If the file has no data rows
        ConfigError: If the file has too few columns or non-numeric cells
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise EmptyDataset(f"{path} has no data") from None
    except FileNotFoundError as e:
        raise ConfigError("dataset", f"cannot read {path}: {e}") from None

    if frame.empty:
        raise EmptyDataset(f"{path} has a header but no rows")
    if frame.shape[1] <= num_outputs:
        raise ConfigError("dataset", f"{path} has {frame.shape[1]} columns; need inputs plus {num_outputs} targets")
    try:
        values = frame.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise ConfigError("dataset", f"{path} contains non-numeric values: {e}") from None

    logging.info(f"Loaded dataset {path}: {values.shape[0]} rows, {values.shape[1] - num_outputs} inputs")
    return values[:, :-num_outputs], values[:, -num_outputs:]


def _func_fit_fitness(outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return -((targets - outputs) ** 2).mean(axis=(-2, -1))


def eval_func_fit(act: Act, dataset: Tuple[np.ndarray, np.ndarray]) -> float:
    """
    Negative mean squared error of the network over a dataset.

    Raises:
        EmptyDataset: If the dataset has no samples
        ShapeMismatch: If the network width does not fit the dataset
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in dataset)
    if x.shape[0] == 0:
        raise EmptyDataset("dataset has no samples")
    y = y.reshape(x.shape[0], -1)
    return float(_func_fit_fitness(_outputs(act, x, y.shape[1]), y))


class FuncFitProblem(BaseProblem):
    name = "func_fit"
    output_activation = "identity"

    def __init__(self, dataset: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        x, y = dataset if dataset is not None else default_dataset()
        if len(x) == 0:
            raise EmptyDataset("dataset has no samples")
        self.x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        self.y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)

    @property
    def input_shape(self) -> int:
        return self.x.shape[1]

    @property
    def output_shape(self) -> int:
        return self.y.shape[1]

    def evaluate(self, key: RngKey, act: Act) -> float:
        return eval_func_fit(act, (self.x, self.y))

    def evaluate_population(self, keys, batch, schema=DEFAULT_SCHEMA, workers=1) -> np.ndarray:
        return _func_fit_fitness(batch_forward(batch, self.x, schema, workers), self.y)

    def show(self, key: RngKey, act: Act) -> str:
        outputs = _outputs(act, self.x, self.output_shape)
        lines = ["input -> target / output"]
        for xs, target, out in list(zip(self.x, self.y, outputs))[:10]:
            lines.append(f"{np.round(xs, 4).tolist()} -> {np.round(target, 4).tolist()} / {np.round(out, 4).tolist()}")
        lines.append(f"mse {-eval_func_fit(act, (self.x, self.y)):.6g}")
        return "\n".join(lines)


# Cart-pole

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
FORCE_LIMIT = 10.0
TIME_STEP = 0.02
POSITION_LIMIT = 2.4
ANGLE_LIMIT = 12 * 2 * math.pi / 360


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    @property
    def terminal(self) -> bool:
        return bool(_terminal(self.as_array()[None, :])[0])


def _dynamics(state: np.ndarray, force: np.ndarray) -> np.ndarray:
    """Euler step for an (n, 4) block of states under an (n,) force vector."""
    x, x_dot, theta, theta_dot = state.T
    force = np.clip(force, -FORCE_LIMIT, FORCE_LIMIT)
    total_mass = CART_MASS + POLE_MASS
    pole_moment = POLE_MASS * POLE_HALF_LENGTH
    cos, sin = np.cos(theta), np.sin(theta)

    temp = (force + pole_moment * theta_dot ** 2 * sin) / total_mass
    theta_acc = (GRAVITY * sin - cos * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos ** 2 / total_mass))
    x_acc = temp - pole_moment * theta_acc * cos / total_mass

    return np.stack([
        x + TIME_STEP * x_dot,
        x_dot + TIME_STEP * x_acc,
        theta + TIME_STEP * theta_dot,
        theta_dot + TIME_STEP * theta_acc,
    ], axis=1)


def _terminal(state: np.ndarray) -> np.ndarray:
    return (np.abs(state[:, 0]) > POSITION_LIMIT) | (np.abs(state[:, 2]) > ANGLE_LIMIT)


def cartpole_step(s: CartPoleState, force: float) -> CartPoleState:
    """
    Advance the cart-pole by one time step.

    Args:
        s: Current state
        force: Horizontal force in newtons, clipped to +/-10

    Raises:
        NonFiniteState: If the state or force is NaN or infinite
    """
    array = s.as_array()
    if not np.isfinite(array).all() or not math.isfinite(force):
        raise NonFiniteState(f"cannot step from {s} with force {force}")
    nxt = _dynamics(array[None, :], np.array([float(force)]))[0]
    return CartPoleState(*(float(v) for v in nxt))


def initial_state(key: RngKey, perturbation: float = 0.05) -> np.ndarray:
    return key.generator().uniform(-perturbation, perturbation, 4) if perturbation > 0 else np.zeros(4)


def eval_cartpole(act: Act, key: RngKey, max_steps: int = 500, perturbation: float = 0.05) -> float:
    """
    Steps survived by a policy, starting from a random perturbation of upright.

    The network sees the raw state and its single output (clipped to [-1, 1])
    is scaled to a force of up to 10 N.
    """
    state = initial_state(key, perturbation)[None, :]
    survived = 0
    for _ in range(max_steps):
        out = _outputs(act, state, 1)
        state = _dynamics(state, FORCE_LIMIT * np.clip(out[:, 0], -1.0, 1.0))
        if not np.isfinite(state).all():
            raise NonFiniteState(f"state diverged to {state[0].tolist()}")
        if _terminal(state)[0]:
            break
        survived += 1
    return float(survived)


class CartPoleProblem(BaseProblem):
    name = "cartpole"
    output_activation = "tanh"

    def __init__(self, max_steps: int = 500, perturbation: float = 0.05):
        self.max_steps = max_steps
        self.perturbation = perturbation

    @property
    def input_shape(self) -> int:
        return 4

    @property
    def output_shape(self) -> int:
        return 1

    def evaluate(self, key: RngKey, act: Act) -> float:
        return eval_cartpole(act, key, self.max_steps, self.perturbation)

    def evaluate_population(self, keys, batch, schema=DEFAULT_SCHEMA, workers=1) -> np.ndarray:
        size = len(batch)
        state = np.stack([initial_state(k, self.perturbation) for k in keys])
        alive = np.ones(size, dtype=bool)
        survived = np.zeros(size)
        live_rows = np.arange(size)
        live_batch = batch

        for _ in range(self.max_steps):
            rows = np.flatnonzero(alive)
            if rows.size == 0:
                break
            if rows.size != live_rows.size:
                live_rows, live_batch = rows, batch.take(rows)
            out = propagate(live_batch, state[rows][:, None, :], schema, workers)[:, 0, :]
            stepped = _dynamics(state[rows], FORCE_LIMIT * np.clip(out[:, 0], -1.0, 1.0))
            if not np.isfinite(stepped).all():
                raise NonFiniteState("cart-pole state diverged")
            state[rows] = stepped
            done = _terminal(stepped)
            survived[rows[~done]] += 1
            alive[rows[done]] = False
        return survived

    def show(self, key: RngKey, act: Act) -> str:
        steps = eval_cartpole(act, key, self.max_steps, self.perturbation)
        return f"balanced {steps:.0f} of {self.max_steps} steps from {np.round(initial_state(key, self.perturbation), 4).tolist()}"


class ProblemService:
    """Registry that builds problems from a run config."""

    def __init__(self):
        self._problems: Dict[str, Type[BaseProblem]] = {
            "xor": XorProblem,
            "func_fit": FuncFitProblem,
            "cartpole": CartPoleProblem,
        }

    def names(self):
        return sorted(self._problems)

    def create(self, cfg: NeatConfig) -> BaseProblem:
        """
        Instantiate the problem a config names and check its I/O widths.

        Raises:
            ConfigError: If the config's inputs/outputs disagree with the problem
        """
        if cfg.problem == "func_fit":
            dataset = load_dataset(cfg.dataset, cfg.dataset_outputs) if cfg.dataset else None
            problem = FuncFitProblem(dataset)
        elif cfg.problem == "cartpole":
            problem = CartPoleProblem(max_steps=cfg.max_steps)
        else:
            problem = self._problems[cfg.problem]()

        if cfg.inputs is not None and cfg.inputs != problem.input_shape:
            raise ConfigError("inputs", f"{cfg.problem} has {problem.input_shape} inputs, config says {cfg.inputs}")
        if cfg.outputs is not None and cfg.outputs != problem.output_shape:
            raise ConfigError("outputs", f"{cfg.problem} has {problem.output_shape} outputs, config says {cfg.outputs}")
        logging.info(f"Problem {problem.name}: {problem.input_shape} inputs, {problem.output_shape} outputs")
        return problem


# Create a singleton instance
problem_service = ProblemService()
