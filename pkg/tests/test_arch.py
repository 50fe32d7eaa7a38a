import pytest

from stemsep import arch
from stemsep.arch import (
    ArchSpec,
    BandPlan,
    ConfigError,
    DenseBlockSpec,
    LstmBlockSpec,
    ScaleSlot,
    canonical_text,
    default_arch,
    parse_arch_text,
    receptive_field,
    reduce_spec,
    toy_arch,
)


def test_default_arch_matches_shipped_table():
    spec = default_arch()
    assert spec.mode == "Sa"
    assert [b.name for b in spec.bands] == ["1", "2", "3"]
    assert [b.growth for b in spec.bands] == [14, 4, 2]
    assert spec.full_band.growth == 7
    band1 = spec.bands[0]
    assert [s.position for s in band1.slots] == ["d1", "d2", "d3", "d4", "u3", "u2", "u1"]
    assert band1.slot("d4").lstm == LstmBlockSpec(128)
    assert band1.slot("u2").lstm == LstmBlockSpec(128)
    assert band1.slot("d1").dense == DenseBlockSpec(5, 14)
    # band 3 bottleneck is LSTM-only
    b3 = spec.bands[2].slot("d3")
    assert b3.dense is None and b3.lstm == LstmBlockSpec(8)
    full = spec.full_band
    assert [s.dense.layers for s in full.down_slots] == [3, 3, 4, 5, 5]
    assert full.slot("d4").lstm == LstmBlockSpec(128)
    assert full.slot("u2").lstm == LstmBlockSpec(128)
    assert spec.final_layers == 3 and spec.final_growth == 12


def test_band_bin_partition():
    spec = default_arch()
    layout = spec.band_layout()
    assert layout.ranges == [(0, 381), (381, 1022), (1022, 2049)]
    assert spec.band_padded_bins(spec.bands[0]) == 384  # multiple of 2^3
    assert spec.band_padded_bins(spec.full_band) == 2064  # multiple of 2^4
    assert spec.time_pad_multiple == 16


def test_canonical_round_trip():
    spec = default_arch()
    text = canonical_text(spec)
    again = parse_arch_text(text)
    assert canonical_text(again) == text
    assert again.content_hash() == spec.content_hash()


def test_parse_rejects_bad_configs():
    with pytest.raises(ConfigError):
        parse_arch_text("mode Zz\n")
    with pytest.raises(ConfigError):
        parse_arch_text("frobnicate 3\n")
    # slot before any band stanza
    with pytest.raises(ConfigError):
        parse_arch_text("mode Sa\nd1 l=3\n")
    # missing full band
    with pytest.raises(ConfigError):
        parse_arch_text("band 1 growth=2\n  d1 l=1\n")


def test_slot_validation():
    with pytest.raises(ConfigError):
        ScaleSlot("d1")  # neither block
    with pytest.raises(ConfigError):
        DenseBlockSpec(layers=-1, growth=2)
    with pytest.raises(ConfigError):
        LstmBlockSpec(units=0)
    with pytest.raises(ConfigError):
        BandPlan("x", 2, (ScaleSlot("d2", DenseBlockSpec(1, 2)),))  # no d1


def test_reduce_spec_halves_and_shallows():
    spec = default_arch()
    red = reduce_spec(spec)
    assert [b.growth for b in red.bands] == [7, 2, 1]
    assert red.full_band.growth == 3
    assert red.bands[0].depth == spec.bands[0].depth - 1
    assert red.full_band.depth == 4
    # the dropped bottleneck LSTM migrates to the new bottleneck
    assert red.full_band.slot("d4").lstm is not None
    assert red.bands[0].slot("d3").lstm == LstmBlockSpec(64)


# ---------------------------------------------------------------------------
# receptive field (hand-derived values)


def plan(slots):
    return BandPlan("x", 3, tuple(slots))


def test_receptive_field_single_conv():
    p = plan([ScaleSlot("d1", DenseBlockSpec(1, 3))])
    # one 3x3 conv sees 3 frames
    assert arch._plan_receptive_field(p, stem=False) == 3


def test_receptive_field_two_scale_hand_value():
    # hand derivation: 3 convs at scale 1 -> 7; pool -> 8 (jump 2);
    # 3 convs at scale 2 -> 8 + 3*2*2 = 20; upsample adds nothing;
    # 3 convs back at scale 1 -> 26
    p = plan([
        ScaleSlot("d1", DenseBlockSpec(3, 3)),
        ScaleSlot("d2", DenseBlockSpec(3, 3)),
        ScaleSlot("u1", DenseBlockSpec(3, 3)),
    ])
    assert arch._plan_receptive_field(p, stem=False) == 26


def test_receptive_field_with_stem_hand_value():
    # stem conv: 1 + 2 = 3; two convs -> 7; pool -> 8 (jump 2);
    # two convs at scale 2 -> 16; upsample; two convs -> 20
    p = plan([
        ScaleSlot("d1", DenseBlockSpec(2, 3)),
        ScaleSlot("d2", DenseBlockSpec(2, 3)),
        ScaleSlot("u1", DenseBlockSpec(2, 3)),
    ])
    assert arch._plan_receptive_field(p, stem=True) == 20


def test_receptive_field_full_spec_reports_all_bands():
    spec = default_arch()
    rf = receptive_field(spec)
    assert set(rf["per_band"]) == {"1", "2", "3", "full"}
    assert rf["overall_conv_frames"] == rf["per_band"]["full"]["conv_frames"]
    # every band with an LSTM block is flagged (LSTM context is unbounded)
    assert all(rf["per_band"][b]["has_lstm"] for b in rf["per_band"])


# ---------------------------------------------------------------------------
# closed-form counts


def test_conv_and_dense_closed_forms():
    assert arch.conv_param_count(2, 14, 3, 3) == 2 * 14 * 9 + 14  # 266
    # l=5, k=14, c_in=2: layer j sees 2 + j*14 channels
    total = arch.dense_block_param_count(2, 5, 14)
    expected = sum(2 * c + (c * 14 * 9 + 14) for c in (2, 16, 30, 44, 58))
    assert total == expected


def test_lstm_block_closed_form_hand_count():
    # c_in=4, f=16, m=8:
    # 1x1 conv: 4*1+1 = 5
    # per direction, 4 gates: 8*16 in + 8*8 rec + 8 bias = 200 -> x4 gates
    # both directions: 2 * 4 * 200 = 1600
    # linear 2m->f: 16*16 + 16 = 272
    assert arch.lstm_block_param_count(4, 16, 8) == 5 + 1600 + 272


def test_toy_arch_is_valid():
    spec = toy_arch()
    assert spec.num_bins == 129
    assert len(spec.bands) == 3
    assert ArchSpec is not None
