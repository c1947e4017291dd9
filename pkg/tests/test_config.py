from pathlib import Path

import pytest

from doserlab.config import ARTIFACTS_ENV, RunConfig, config_text, load_config, parse_config
from doserlab.errors import PersistenceError, RejectedInput


def test_empty_config_is_all_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    ac = cfg.agent_config()
    assert (ac.gamma, ac.beta, ac.lam, ac.eta, ac.expectile) == (0.99, 0.001, 0.001, 0.9, 0.9)
    assert (ac.n_candidates, ac.batch_size, ac.rho, ac.mode) == (10, 256, 0.005, "full")
    assert cfg.ood.percentile_a == cfg.ood.percentile_s == 99.0


def test_cross_section_keys_reach_the_agent():
    cfg = parse_config("[ood]\ngating = yes\n[diffusion]\nm_draws = 4\nsampler_steps = 6\n")
    ac = cfg.agent_config()
    assert ac.gating and ac.m_draws == 4 and ac.sampler_steps == 6


def test_values_are_typed():
    cfg = parse_config("[run]\nseed = 7\n[agent]\nhidden = 32, 16\nq_min = -50\nmode = no_vc\n"
                       "[diffusion]\nsigma_data = 0.25\n[paths]\nartifacts = out/x\n")
    assert cfg.seed == 7 and cfg.agent.hidden == (32, 16) and cfg.agent.q_min == -50.0
    assert cfg.agent.mode == "no_vc" and cfg.diffusion.schedule().sigma_data == 0.25
    assert parse_config("[agent]\nq_min = none\n").agent.q_min is None


@pytest.mark.parametrize("text", [
    "[agent]\nbta = 0.1\n",          # typo
    "[agent]\ngating = true\n",      # owned by [ood]
    "[optim]\nlr = 1\n",             # unknown section
    "[run]\nseed = one\n",
    "[ood]\ngating = maybe\n",
    "[ood]\npercentile_a = 0\n",
    "[env]\nkind = random\n",
    "[agent]\nmode = half\n",
    "[agent]\ngamma = 1.0\n",
    "[diffusion]\nsigma_min = 100\n",
    "[diffusion]\nc_in_mode = cube\n",
    "not an ini file",
])
def test_rejects_bad_configs(text):
    with pytest.raises(RejectedInput):
        parse_config(text)


def test_text_round_trip():
    cfg = parse_config("[run]\nseed = 3\n[agent]\nlam = 0.01\nhidden = 8,8\n[ood]\ngating = true\n")
    assert parse_config(config_text(cfg)) == cfg
    assert config_text(parse_config(config_text(cfg))) == config_text(cfg)


def test_artifact_dir_env_override(monkeypatch, tmp_path):
    cfg = parse_config("[paths]\nartifacts = here\n")
    monkeypatch.delenv(ARTIFACTS_ENV, raising=False)
    assert cfg.artifact_dir() == Path("here")
    monkeypatch.setenv(ARTIFACTS_ENV, str(tmp_path))
    assert cfg.artifact_dir() == tmp_path


def test_load_config_errors(tmp_path):
    with pytest.raises(PersistenceError):
        load_config(tmp_path / "nope.ini")
    p = tmp_path / "c.ini"
    p.write_text("[env]\nn = 10\n")
    assert load_config(p).env.n == 10
