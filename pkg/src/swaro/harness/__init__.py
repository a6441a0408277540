from .config import (ConfigError, RunConfig, config_from_dict, load_config, load_preset,
                     preset_names)
from .protocol import (AblationRow, ablation_csv, eval_attack, fit_probe, run_ablation,
                       standard_report)
from .training import (TrainingError, TrainingLog, TrainResult, load_trained, split_dataset,
                       train, write_outputs)

__all__ = ["AblationRow", "ConfigError", "RunConfig", "TrainResult", "TrainingError",
           "TrainingLog", "ablation_csv", "config_from_dict", "eval_attack", "fit_probe",
           "load_config", "load_preset", "load_trained", "preset_names", "run_ablation",
           "split_dataset", "standard_report", "train", "write_outputs"]
