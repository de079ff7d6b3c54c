import os
import sys

import torch

sys.path.insert(0, os.path.dirname(__file__))

torch.set_num_threads(max(1, os.cpu_count() or 1))
torch.manual_seed(0)
