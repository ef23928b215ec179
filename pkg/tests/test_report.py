import numpy as np
import pytest
import torch

from patchflow.ablate import (
    DESK_ABLATION_HEADS,
    REFERENCE_HEADS,
    AblationReport,
    AblationRow,
    AblationSettings,
    ablate_heads,
    eval_head_loss,
    harvest_pairs,
    train_head_only,
)
from patchflow.backbone import ModelConfig
from patchflow.corpus import SyntheticCorpusSpec, make_corpus
from patchflow.heads import FMHeadConfig, count_params
from patchflow.latency import REFERENCE_ANCHORS, accumulate
from patchflow.model import GenerativeModel
from patchflow.report import LAYOUT, RunArtifacts, write_report
from patchflow.sampler import TokenStatsTrace
from patchflow.trainer import LossRecord

TINY = ModelConfig(
    layers=2, model_dim=32, n_heads=2, ffn_dim=64,
    vocab_size=64, max_seq_len=128, token_dim=64,
    head=FMHeadConfig(layers=2, hidden=32, cond_dim=32, token_dim=64, time_dim=8),
)


class TestReportLayout:
    def test_empty_run_writes_full_layout(self, tmp_path):
        written = write_report(str(tmp_path), RunArtifacts())
        for name in LAYOUT:
            assert (tmp_path / name).exists()
        assert (tmp_path / "loss.csv").read_text() == \
            "step,lr,L_text,L_visual,total\n"
        assert (tmp_path / "trace.csv").read_text() == \
            "token_index,mean,variance\n"
        assert len(written) == 5  # samples/ dir itself is not listed

    def test_populated_run(self, tmp_path, rng):
        trace = TokenStatsTrace()
        trace.add(torch.tensor([0.5, -0.5]))
        artifacts = RunArtifacts(
            loss_history=[LossRecord(0, 1e-3, 2.0, 1.0, 1.02)],
            trace=trace,
            latency=accumulate(REFERENCE_ANCHORS),
            histogram=[(0, -1.0, 1.0, 10)],
            samples=[rng.random((8, 8, 3)).astype(np.float32)],
            notes=["calibration note"],
        )
        write_report(str(tmp_path), artifacts)
        assert (tmp_path / "samples" / "000.ppm").exists()
        report = (tmp_path / "report.txt").read_text()
        assert "training steps recorded: 1" in report
        assert "calibration note" in report
        assert "band violations" in report
        loss_lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert loss_lines[1].startswith("0,")


class TestAblationReport:
    def test_csv_layout(self):
        report = AblationReport((
            AblationRow("small", 2, 96, 1000, 0.5, float("nan")),
            AblationRow("base", 3, 192, 2000, 0.55, float("nan")),
        ))
        lines = report.to_csv().splitlines()
        assert lines[0] == "name,layers,hidden,params,final_fm_loss,psnr_nearest"
        assert lines[1].startswith("small,2,96,1000,0.5")

    def test_max_pairwise_rel_diff(self):
        report = AblationReport((
            AblationRow("a", 1, 1, 1, 1.0, 0.0),
            AblationRow("b", 1, 1, 1, 1.1, 0.0),
            AblationRow("c", 1, 1, 1, 1.05, 0.0),
        ))
        assert report.max_pairwise_rel_diff() == pytest.approx(0.1)

    def test_head_families_are_ordered_by_size(self):
        for family in (DESK_ABLATION_HEADS, REFERENCE_HEADS):
            sizes = [count_params(c) for c in family.values()]
            assert sizes == sorted(sizes)
            assert list(family) == ["small", "base", "large"]


@pytest.fixture(scope="module")
def setup(tokenizer, vocab):
    corpus = make_corpus(
        SyntheticCorpusSpec(image_size=16, size_per_category=4,
                            categories=("pair",)),
        tokenizer,
    )
    model = GenerativeModel(TINY, seed=0)
    from patchflow.trainer import corpus_stats
    model.set_channel_stats(corpus_stats({16: corpus}, tokenizer))
    return model, corpus


class TestAblationHarness:
    def test_harvest_shapes_and_determinism(self, setup, tokenizer, vocab):
        model, corpus = setup
        conds, targets = harvest_pairs(model, corpus, vocab, tokenizer,
                                       caption_drop=0.5, seed=0)
        assert conds.shape[0] == targets.shape[0]
        assert conds.shape[1] == TINY.model_dim
        assert targets.shape[1] == TINY.token_dim
        # 4 pair samples x 4 tokens, plus dropped variants
        assert conds.shape[0] >= 16
        conds2, targets2 = harvest_pairs(model, corpus, vocab, tokenizer,
                                         caption_drop=0.5, seed=0)
        assert torch.equal(conds, conds2)
        assert torch.equal(targets, targets2)

    def test_equal_budget_training_and_eval(self, setup, tokenizer, vocab):
        model, corpus = setup
        conds, targets = harvest_pairs(model, corpus, vocab, tokenizer,
                                       caption_drop=0.5, seed=0)
        settings = AblationSettings(steps=30, batch_size=16, eval_draws=4,
                                    seed=0)
        cfg = FMHeadConfig(layers=2, hidden=32, cond_dim=32, token_dim=64,
                           time_dim=8)
        head = train_head_only(cfg, conds, targets, settings, head_seed=1)
        trained = eval_head_loss(head, conds, targets, 4, 0)
        fresh = FMHeadConfig(layers=2, hidden=32, cond_dim=32, token_dim=64,
                             time_dim=8)
        from patchflow.heads import FlowMatchingHead
        untrained = eval_head_loss(FlowMatchingHead(fresh), conds, targets, 4, 0)
        assert trained < untrained

    def test_eval_pack_shared_across_heads(self, setup, tokenizer, vocab):
        model, corpus = setup
        conds, targets = harvest_pairs(model, corpus, vocab, tokenizer,
                                       caption_drop=0.0, seed=0)
        from patchflow.heads import FlowMatchingHead
        cfg = FMHeadConfig(layers=2, hidden=32, cond_dim=32, token_dim=64,
                           time_dim=8)
        head = FlowMatchingHead(cfg)
        a = eval_head_loss(head, conds, targets, 8, seed=3)
        b = eval_head_loss(head, conds, targets, 8, seed=3)
        assert a == b

    def test_full_harness_smoke(self, setup, tokenizer, vocab):
        model, corpus = setup
        configs = {
            "tiny": FMHeadConfig(layers=1, hidden=16, cond_dim=32,
                                 token_dim=64, time_dim=8),
            "wide": FMHeadConfig(layers=1, hidden=32, cond_dim=32,
                                 token_dim=64, time_dim=8),
        }
        settings = AblationSettings(steps=10, batch_size=8, eval_draws=2,
                                    seed=0)
        report = ablate_heads(model, configs, corpus, vocab, tokenizer,
                              settings)
        assert [r.name for r in report.rows] == ["tiny", "wide"]
        assert all(np.isnan(r.psnr_nearest) for r in report.rows)
        assert all(np.isfinite(r.final_fm_loss) for r in report.rows)
        assert report.max_pairwise_rel_diff() >= 0.0
