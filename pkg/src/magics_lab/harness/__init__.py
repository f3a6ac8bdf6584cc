"""Experiment orchestration: configs, tournaments, exploiters and the command line."""

from magics_lab.harness.config import ConfigError, RunConfig, load_config, parse_config
from magics_lab.harness.exploit import exploit
from magics_lab.harness.tournament import Player, ResultMatrix, TournamentSpec, load_player, run_tournament

__all__ = ["ConfigError", "Player", "ResultMatrix", "RunConfig", "TournamentSpec", "exploit", "load_config",
           "load_player", "parse_config", "run_tournament"]
