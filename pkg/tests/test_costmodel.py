from pathlib import Path

import pytest

from costmodel import (CostModelInput, applicable_schemes, cheetah_stage_counts, costmodel, latex_table, main,
                       network_costs)
from nn_model import TEMPLATES, load_network
from protocol import plan_stages

NETWORKS = Path(__file__).resolve().parents[1] / "networks"


def fc(n_i, n_o, n=10000):
    return CostModelInput("fc", n=n, n_i=n_i, n_o=n_o)


def counts(row):
    return row["perm"], row["mult"], row["add"]


class TestFc:
    @pytest.mark.parametrize("n_i, n_o, perm", [(2048, 1, 11), (1024, 2, 10), (128, 16, 7)])
    def test_hybrid_baseline(self, n_i, n_o, perm):
        assert counts(costmodel("gazelle-fc", fc(n_i, n_o, 2048))) == (perm, 1, perm)

    @pytest.mark.parametrize("n_i, n_o", [(2048, 1), (1024, 2), (128, 16)])
    def test_permutation_free(self, n_i, n_o):
        assert counts(costmodel("cheetah", fc(n_i, n_o, 2048))) == (0, 1, 1)

    def test_naive_and_diagonal(self):
        assert counts(costmodel("naive-fc", fc(2048, 1, 2048))) == (11, 1, 11)
        assert counts(costmodel("hs-fc", fc(2048, 1, 2048))) == (2048, 2048, 2048)

    def test_communication(self):
        ours = costmodel("cheetah", fc(2048, 1))
        base = costmodel("gazelle-fc", fc(2048, 1))
        assert ours["comm_kb"] == 146.5
        assert base["comm_bits"] - ours["comm_bits"] == 38500
        assert costmodel("hs-fc", fc(2048, 1))["comm_bits"] is None

    def test_many_outputs_need_more_ciphertexts(self):
        row = costmodel("cheetah", fc(1000, 100, 4096))
        assert counts(row) == (0, 25, 25)

    def test_input_wider_than_ring(self):
        row = costmodel("cheetah", fc(9216, 4096, 4096))
        assert counts(row) == (0, 3 * 4096, 3 * 4096)

    def test_conv_scheme_rejected(self):
        with pytest.raises(ValueError):
            costmodel("gazelle-ir", fc(10, 10))


class TestConv:
    def conv(self, c_i=1, c_o=1, r=3, image=8, n=4096):
        return CostModelInput("conv", n=n, r=r, c_i=c_i, c_o=c_o, image=(image, image))

    def test_single_channel(self):
        assert counts(costmodel("gazelle-siso", self.conv())) == (8, 9, 8)
        assert counts(costmodel("cheetah", self.conv())) == (0, 1, 1)

    def test_siso_needs_one_channel(self):
        with pytest.raises(ValueError):
            costmodel("gazelle-siso", self.conv(c_i=2))
        assert "gazelle-siso" not in applicable_schemes(self.conv(c_i=2))

    def test_input_and_output_rotation(self):
        inp = self.conv(c_i=4, c_o=2)
        assert counts(costmodel("gazelle-ir", inp)) == (36, 2, 2)
        assert counts(costmodel("gazelle-or", inp)) == (2, 2, 2)

    def test_cheetah_multi_channel(self):
        # 64 outputs x 9 taps fill 576 slots; seven channels share a ciphertext
        row = costmodel("cheetah", self.conv(c_i=16, c_o=4))
        assert counts(row) == (0, 4 * 3, 4 * 3)
        assert row["comm_bits"] == (3 + 1) * 4096 * 60

    def test_explicit_channels_per_ciphertext(self):
        inp = CostModelInput("conv", n=4096, r=3, c_i=4, c_o=2, c_n=2, image=(8, 8))
        assert costmodel("gazelle-ir", inp)["mult"] == 36

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            costmodel("cheetah", self.conv(c_i=0))


class TestStageCounts:
    def test_tiny_relu(self):
        plan = plan_stages(TEMPLATES["tiny"](), 1024)
        stage = plan.stages[0]
        assert cheetah_stage_counts(stage, None, 1024) == {"perm": 0, "mult": 3, "add": 4}

    def test_final_linear_has_no_absorb(self):
        plan = plan_stages(TEMPLATES["netA"](), 1024)
        last = plan.stages[-1]
        assert cheetah_stage_counts(last, None, 1024) == {"perm": 0, "mult": 1, "add": 1}

    def test_softmax_stage(self):
        plan = plan_stages(TEMPLATES["smooth"](), 1024)
        last = plan.stages[-1]
        assert cheetah_stage_counts(last, None, 1024) == {"perm": 0, "mult": 3, "add": 2}


class TestNetworks:
    def test_alexnet_table(self):
        df = network_costs(load_network(NETWORKS / "alexnet.json", require_weights=False))
        assert set(df["layer"].str.split(":").str[1]) == {"conv", "fc"}
        assert (df.loc[df["scheme"] == "cheetah", "perm"] == 0).all()
        assert (df.loc[df["scheme"] != "cheetah", "perm"] > 0).all()

    def test_scheme_filter(self):
        df = network_costs(TEMPLATES["netB"](), n=4096, schemes=["cheetah"])
        assert list(df["scheme"].unique()) == ["cheetah"] and len(df) == 4

    def test_latex(self):
        df = network_costs(TEMPLATES["netA"](), n=4096, schemes=["cheetah", "gazelle-fc"])
        tex = latex_table(df, "cost", "tab:x", "lll" + "r" * 5)
        assert tex.startswith("\\begin{table}") and "gazelle-fc" in tex


class TestMain:
    def test_single_layer(self, capsys):
        assert main(["--kind", "fc", "--n-i", "2048", "--n-o", "1", "--n", "2048", "--scheme", "gazelle-fc"]) == 0
        out = capsys.readouterr().out
        assert "gazelle-fc" in out and "11" in out

    def test_network_to_files(self, tmp_path, capsys):
        assert main(["--net", str(NETWORKS / "vgg16.json"), "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "costmodel.csv").exists() and (tmp_path / "costmodel.tex").exists()
        assert "Wrote:" in capsys.readouterr().out

    def test_bad_layer_is_usage_error(self):
        assert main(["--kind", "fc", "--n-i", "0", "--n-o", "1"]) == 1

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["--net", str(tmp_path / "none.json")])
        assert e.value.code == 1
