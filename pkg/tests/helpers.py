from pathlib import Path

import numpy as np

from rankgame.mdp import Policy, TabularMdp

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


def random_policy(rng, n_states, n_actions, conc=1.0):
    return Policy(rng.dirichlet(np.full(n_actions, conc), size=n_states))


def two_state_cycle(gamma=0.5):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    return TabularMdp(P, gamma, np.array([1.0, 0.0]), horizon=4)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
