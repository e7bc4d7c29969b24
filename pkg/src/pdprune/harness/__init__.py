from .baseline import hard_baseline_step
from .data import Dataset, load_mnist, load_mnist_split, synthetic_split, synthetic_task
from .metrics import FlipTracker, MacReport, dip_near_zero, log_histogram, mac_count, sparsity_report
from .models import (Conv2d, Flatten, Linear, ModelSpec, Network, ReLU, build_spec, mlp, mnist_mlp,
                     toy_cnn, toy_mlp)
