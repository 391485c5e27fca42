"""scikit-learn style wrapper around the trainer.

``X`` is a sequence of :class:`~deskrl.tasks.TaskInstance`; there are no
labels because each instance carries its own verifier. ``fit`` trains with
prompts drawn from ``X``, ``predict`` returns greedily decoded answers and
``score`` is sampled pass@1.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .evaluation import EVAL_TEMPERATURE, evaluate_policy
from .policy import greedy_decode
from .tasks import parse_answer
from .trainer import MixtureEntry, ResetPolicy, StageConfig, TrainerState, run_stages
from .vocab import VOCAB

_TAG_FIT = 7


class GRPOPolicy(BaseEstimator):
    def __init__(self, steps=3000, seed=0, d=16, h=32, w=4, max_len=32, temperature=1.2,
                 n_rollouts=16, batch_size=16, minibatch_size=4, eps_low=0.2, eps_high=0.4,
                 beta=1e-3, penalty=0.5, lr=1e-2, weight_decay=0.01, reset_interval=None,
                 eval_samples=16, eval_temperature=EVAL_TEMPERATURE):
        self.steps = steps
        self.seed = seed
        self.d = d
        self.h = h
        self.w = w
        self.max_len = max_len
        self.temperature = temperature
        self.n_rollouts = n_rollouts
        self.batch_size = batch_size
        self.minibatch_size = minibatch_size
        self.eps_low = eps_low
        self.eps_high = eps_high
        self.beta = beta
        self.penalty = penalty
        self.lr = lr
        self.weight_decay = weight_decay
        self.reset_interval = reset_interval
        self.eval_samples = eval_samples
        self.eval_temperature = eval_temperature

    def _stage(self, X):
        fam = X[0].family
        return StageConfig(
            name="fit", max_len=self.max_len, temperature=self.temperature, n_rollouts=self.n_rollouts,
            batch_size=self.batch_size, minibatch_size=self.minibatch_size, eps_low=self.eps_low,
            eps_high=self.eps_high, beta=self.beta, penalty=self.penalty, lr=self.lr,
            weight_decay=self.weight_decay, reset=ResetPolicy(interval=self.reset_interval),
            mixture=(MixtureEntry(fam, dict(X[0].difficulty)),),
        )

    def fit(self, X, y=None):
        X = list(X)
        if not X:
            raise ValueError("fit needs at least one task instance")
        stage = self._stage(X)
        state = TrainerState.initial(VOCAB.size, seed=self.seed, d=self.d, h=self.h, w=self.w, stage=stage)

        def prompts(st, step):
            rng = np.random.default_rng([self.seed, _TAG_FIT, step])
            return [X[i] for i in rng.integers(0, len(X), size=st.batch_size)]

        self.state_, self.log_ = run_stages(state, [stage], self.steps, prompts_fn=prompts)
        self.params_ = self.state_.params
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise AttributeError("estimator is not fitted; call fit first")

    def predict(self, X):
        """Greedy answers (token tuples, ``None`` when unparseable)."""
        self._check_fitted()
        return [parse_answer(greedy_decode(self.params_, x.prompt, self.max_len).response) for x in X]

    def score(self, X, y=None):
        """Mean sampled pass@1 over ``X``."""
        self._check_fitted()
        m = evaluate_policy(self.params_, list(X), self.eval_samples, self.eval_temperature,
                            self.max_len, seed=self.seed)
        return float(m.pass1_rates().mean())
