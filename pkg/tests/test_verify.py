import dataclasses

import numpy as np
import pytest

from stts import numerics as nx
from stts.encoder import block_index
from stts.model import forward
from stts.packing import plan_packing, select_retention
from stts.verify import run_suite, suite_budget, suite_equivalence, suite_ffd, suite_gradient


def test_suites_pass_on_a_fresh_seed():
    seed = 20261015
    assert suite_budget(seed=seed).ok
    assert suite_ffd(instances=300, seed=seed).ok
    assert suite_equivalence(instances=20, seed=seed).ok
    assert suite_gradient(instances=2, seed=seed).ok


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("nope")


def test_budget_negative_control_off_by_one_block():
    """Double that drops one block fewer than needed: every pruned k fails, k=0 still passes."""

    def short_by_one(scores, k, w, grid, protect):
        r = select_retention(scores, k, w, grid, protect)
        dropped = np.argwhere(~r.block_mask)
        if len(dropped):
            t, j = dropped[-1]
            r.block_mask[t, j] = True
            r.mask = r.block_mask[:, block_index(grid, w)]
        return r

    rep = suite_budget(select_fn=short_by_one)
    failed = [c.name.split(":")[0] for c in rep.failures]
    assert failed == [f"k={k}" for k in range(10, 100, 10)]
    assert rep.checks[0].ok


def test_ffd_negative_control_extra_bin():
    def one_extra_bin(counts, cap):
        assign, offset, load, probes = plan_packing(counts, cap)
        return assign, offset, np.append(load, 0), probes

    rep = suite_ffd(instances=50, plan_fn=one_extra_bin)
    assert not rep.checks[0].ok and "got 4" in rep.checks[0].detail
    assert rep.checks[1].ok  # T' >= OPT still holds


def test_equivalence_negative_control_shifted_offset():
    def shifted(tokens, keep):
        from stts.packing import pack

        p = pack(tokens, keep)
        return dataclasses.replace(p, offset=p.offset + (p.counts < 36))

    rep = suite_equivalence(instances=5, pack_fn=shifted)
    assert not rep.ok and len(rep.checks) == 1


def test_gradient_negative_control_untracked_term():
    """A loss term built off the tape is invisible to backward but not to finite differences."""

    def leaky(model, frames, labels):
        out = forward(model, frames, labels)
        extra = nx.Tensor(np.asarray(0.05 * model.params["scorer.mlp2.b"].data.sum()))
        return dataclasses.replace(out, loss=nx.add(out.loss, extra))

    rep = suite_gradient(instances=1, forward_fn=leaky)
    assert not rep.ok


def test_report_lines():
    rep = suite_ffd(instances=10)
    lines = rep.lines()
    assert lines[0].startswith("[PASS] ffd: [9,5,4,3]")
    assert lines[-1].startswith("ffd: 4/4 checks passed")
