from iguane import Sequence, blocks
from iguane.blocks.normalization import StandardScale


def test_whitestripe_citation():
    assert "whitestripe" in blocks.WhiteStripe().citations


def test_histogram_matching_citation():
    scale = StandardScale((1.0, 50.0, 99.0), (0.0, 1.0, 2.0))
    assert "histogram_matching" in blocks.HistogramMatching(scale).citations


def test_sequence_citations():
    sequence = Sequence([blocks.MedianNormalize(), blocks.WhiteStripe()])
    tex, bib = sequence.citations()
    assert "\\citep{iguane}" in tex
    assert "whitestripe" in tex
    assert "@" in bib
