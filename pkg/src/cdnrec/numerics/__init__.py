from cdnrec.numerics.checkpoint import load_checkpoint, save_checkpoint
from cdnrec.numerics.gradcheck import GradCheckReport, check_gradients
from cdnrec.numerics.optim import SGD, Adam, make_optimizer
from cdnrec.numerics.tape import Node, ParamStore, Tape

__all__ = [
    "Adam",
    "GradCheckReport",
    "Node",
    "ParamStore",
    "SGD",
    "Tape",
    "check_gradients",
    "load_checkpoint",
    "make_optimizer",
    "save_checkpoint",
]
