"""Smoke test for the persona_probe extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math

import persona_probe as pp


def main() -> None:
    assert abs(pp.rouge1_f1("the cat sat on the mat", "the cat lay on a mat") - 4 / 6) < 1e-12
    assert pp.rouge_l_f1("", "anything") == 0.0

    v = pp.classify("Rewritten Sentence:", "I skipped the party.")
    assert v.class_name == "Erasure", v
    v = pp.classify("I'm sorry, I can't help with that.", "I skipped the party.")
    assert v.class_name == "Refusal", v
    assert pp.extract_content('Rewritten Sentence: "Plain words."') == "Plain words."

    w = pp.wilcoxon([0.1, 0.2, 0.3, 0.4, 0.5])
    assert w.method == "Exact" and abs(w.p_value - 0.0625) < 1e-12, w
    assert abs(pp.rank_biserial([3.0, -1.0, 2.0]) - 2 / 3) < 1e-9
    lo, hi = pp.bootstrap_ci([0.1, 0.3, -0.2, 0.4, 0.0], resamples=2000, seed=1)
    assert lo <= hi

    assert abs(pp.pairwise_kappa([1] * 20 + [1] * 5 + [0] * 10 + [0] * 15,
                                 [1] * 20 + [0] * 5 + [1] * 10 + [0] * 15) - 0.4) < 1e-9
    y, hard = pp.weighted_label({"a": 1, "b": 0, "c": 1}, {"a": 0.5, "b": 1.0, "c": 1.5})
    assert math.isclose(y, 2 / 3) and hard == 1

    aut, nt = pp.rewrite_prompts("Routines help me.", preceding="I woke early.")
    assert aut != nt and "Routines help me." in aut and "Routines help me." in nt

    try:
        pp.wilcoxon([float("nan")])
    except ValueError:
        pass
    else:
        raise AssertionError("NaN deltas must raise ValueError")

    print("persona_probe smoke test passed")


if __name__ == "__main__":
    main()
