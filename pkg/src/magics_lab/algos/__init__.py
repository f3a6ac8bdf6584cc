"""Learning algorithms: tau-GDA, the Stackelberg critic gradient and the actor-critic trainers."""

from magics_lab.algos.gda import DivergenceError, GdaResult, tau_gda, tau_gda_step
from magics_lab.algos.game_trainer import GameTrainConfig, GameTrainResult, magics_train_game, train_game
from magics_lab.algos.offpolicy import OffPolicyConfig, OffPolicyTrainer, TrainResult, benchmark_update, train_offpolicy
from magics_lab.algos.onpolicy import A2CConfig, A2CTrainer, train_a2c
from magics_lab.algos.schedules import LearningRateSchedule, is_faster_timescale
from magics_lab.algos.stackelberg import fisher_solve, stackelberg_total_derivative

__all__ = [
    "A2CConfig", "A2CTrainer", "DivergenceError", "GameTrainConfig", "GameTrainResult", "GdaResult",
    "LearningRateSchedule", "OffPolicyConfig", "OffPolicyTrainer", "TrainResult", "benchmark_update",
    "fisher_solve", "is_faster_timescale", "magics_train_game", "stackelberg_total_derivative", "tau_gda",
    "tau_gda_step", "train_a2c", "train_game", "train_offpolicy",
]
