from .adam import AdamState, adam_step
from .nets import ChromNet, SeparateNet, ShadingNet, SingleNet
from .tensor import Tensor
from .train import Model, TrainConfig, infer, load_checkpoint, save_checkpoint, train

__all__ = ["AdamState", "adam_step", "ChromNet", "SeparateNet", "ShadingNet", "SingleNet", "Tensor",
           "Model", "TrainConfig", "infer", "load_checkpoint", "save_checkpoint", "train"]
