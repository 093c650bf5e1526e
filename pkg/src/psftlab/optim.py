import numpy as np

from psftlab import kernels


class Adam:
    """Adam with decoupled weight decay; constant learning rate."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.data.size) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.size) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
        return float(np.sqrt(sq))

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = np.ascontiguousarray(p.grad, dtype=np.float64).reshape(-1)
            kernels.adam_update(p.data.reshape(-1), g, self.m[k], self.v[k], self.lr,
                                self.beta1, self.beta2, self.eps, self.weight_decay, self.t)
