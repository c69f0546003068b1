import pytest
from hypothesis import given
from hypothesis import strategies as st

from abbnn.errors import SpecError
from abbnn.graphspec import GraphSpec, find_spec, load_spec, parse_activation

BUNDLED = ["toy2block", "toy_dense", "reactnet18", "reactnet34", "reactnetA"]

TINY = """
input c=2 h=8 w=8
firstconv c_out=4 k=3 pad=1 fp=1
block
  maskedsign
  binconv c_out=4 k=3 pad=1
  qrprelu
end
flatten
lastdense n_out=3 fp=1
"""


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_specs_round_trip(name):
    spec = load_spec(name)
    again = GraphSpec.parse(spec.to_text())
    assert again == spec
    assert again.to_text() == spec.to_text()


def test_resolve_tiny():
    spec = GraphSpec.parse(TINY)
    shapes = [r.out_shape for r in spec.resolve()]
    assert shapes[0] == (4, 8, 8)
    assert shapes[-1] == (3, 1, 1)
    assert spec.output_shape() == (3, 1, 1)


def test_toy2block_downsampling_block():
    r = [r for r in load_spec("toy2block").resolve() if r.kind == "end"]
    assert (r[0].pool_shortcut, r[0].repeat) == (False, 1)
    assert (r[1].pool_shortcut, r[1].repeat) == (True, 2)
    assert r[1].downsample


def test_resolve_at_other_resolution():
    spec = load_spec("reactnet18")
    assert spec.resolve(224)[0].out_shape == (64, 56, 56)
    assert spec.output_shape(224) == (1000, 1, 1)


@pytest.mark.parametrize(
    "text,line",
    [
        ("input c=1 h=4 w=4\nbogus\n", 2),
        ("input c=1 h=4 w=4\nfirstconv c_out=2 fp=1\n", 2),  # missing k
        ("input c=1 h=4 w=4\nblock\nmaskedsign\nbinconv c_out=1 k=3 pad=1\n", 2),  # unterminated
        ("input c=1 h=4 w=4\nbinconv c_out=1 k=1\n", 2),  # binconv without maskedsign
        ("input c=1 h=4 w=4\nmaskedsign channels=3\n", 2),
        ("input c=1 h=5 w=5\navgpool\n", 2),
        ("input c=1 h=4 w=4\nfirstconv c_out=2 k=3 fp=0\n", 2),
        ("input c=1 h=4 w=4\nend\n", 2),
        ("input c=1 h=4 w=4\nrleaky slope_exp=x\n", 2),
        ("input c=1 h=4 w=4\nblock\nblock\n", 3),
    ],
)
def test_parse_errors_carry_line(text, line):
    with pytest.raises(SpecError) as exc:
        GraphSpec.parse(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_missing_input():
    with pytest.raises(SpecError, match="input"):
        GraphSpec.parse("flatten\n")


def test_non_integer_alpha():
    with pytest.raises(SpecError, match="alpha_exp"):
        GraphSpec.parse("input c=1 h=2 w=2\noption alpha_exp=0.5\n")


def test_incompatible_shortcut():
    text = "input c=2 h=8 w=8\nblock\nmaskedsign\nbinconv c_out=3 k=3 pad=1\nend\n"
    with pytest.raises(SpecError, match="multiple"):
        GraphSpec.parse(text)


def test_validate_trainable():
    spec = GraphSpec.parse("input c=1 h=4 w=4\nflatten\n")
    with pytest.raises(SpecError):
        spec.validate_trainable()
    GraphSpec.parse(TINY).validate_trainable()


def test_with_activation_rewrites_every_prelu():
    spec = load_spec("toy_dense")
    leaky = spec.with_activation("rleaky:-7")
    kinds = [l.kind for l in leaky.layers]
    assert "qrprelu" not in kinds
    assert all(l.fields["slope_exp"] == -7 for l in leaky.layers if l.kind == "rleaky")
    back = leaky.with_activation("quantized")
    assert all(l.kind != "rleaky" for l in back.layers)
    assert spec.with_activation(None) is spec


@pytest.mark.parametrize("mode,expected", [("quantized", ("qrprelu", None)), ("rleaky:-3", ("rleaky", -3))])
def test_parse_activation(mode, expected):
    assert parse_activation(mode) == expected


@pytest.mark.parametrize("mode", ["rleaky", "rleaky:x", "relu"])
def test_parse_activation_rejects(mode):
    with pytest.raises(SpecError):
        parse_activation(mode)


def test_find_spec(tmp_path):
    assert find_spec("toy2block").name == "toy2block.spec"
    p = tmp_path / "mine.spec"
    p.write_text(TINY)
    assert find_spec(p) == p
    with pytest.raises(FileNotFoundError):
        find_spec(tmp_path / "missing.spec")


def test_concat_checks_shapes():
    head = GraphSpec.parse("input c=2 h=8 w=8\nblock\nmaskedsign\nbinconv c_out=2 k=3 pad=1\nend\n")
    both = head.concat(head)
    assert len(both.layers) == 2 * len(head.layers)
    with pytest.raises(SpecError):
        head.concat(GraphSpec.parse("input c=3 h=8 w=8\nflatten\n"))


@given(st.lists(st.sampled_from(["same", "down"]), min_size=1, max_size=4), st.integers(-4, -1))
def test_generated_specs_round_trip(kinds, alpha):
    lines = ["input c=2 h=16 w=16", f"option alpha_exp={alpha}"]
    c = 2
    for k in kinds:
        if k == "down":
            c *= 2
        stride = 2 if k == "down" else 1
        lines += ["block", "maskedsign", f"binconv c_out={c} k=3 stride={stride} pad=1", "qrprelu", "end"]
    spec = GraphSpec.parse("\n".join(lines))
    assert GraphSpec.parse(spec.to_text()) == spec
    assert spec.output_shape()[0] == c
