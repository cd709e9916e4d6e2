import pytest
from hypothesis import given
from hypothesis import strategies as st

from relkit.data import WordPair
from relkit.encoder import build_vocab, normalize, split_words
from relkit.prompting import (
    PromptTemplate,
    TemplateError,
    builtin_templates,
    fill,
    get_template,
    load_templates,
    mask_positions_of,
    render,
)


@pytest.fixture(scope="module")
def vocab():
    words = ["sun", "star", "dog", "animal", "New", "York", "city"]
    return build_vocab([t.text for t in builtin_templates()] + words)


def test_five_builtin_templates():
    templates = builtin_templates()
    assert [t.id for t in templates] == [1, 2, 3, 4, 5]
    assert templates[0].text == ("Today, I finally discovered the relation between [h] and [t] : "
                                 "[h] is the <mask> of [t]")


def test_template_five_surface(vocab):
    prompt = render(get_template(5), WordPair("sun", "star"), vocab)
    assert prompt.surface == ("I wasn’t aware of this relationship, but I just read in the encyclopedia "
                              "that star is sun’s <mask>")


@pytest.mark.parametrize("template", builtin_templates(), ids=lambda t: f"t{t.id}")
def test_exactly_one_mask(template, vocab):
    prompt = render(template, WordPair("dog", "animal"), vocab)
    assert prompt.token_ids.count(vocab.mask_id) == 1
    assert prompt.mask_positions == mask_positions_of(prompt.token_ids, vocab)
    assert prompt.token_ids[0] == vocab.bos_id and prompt.token_ids[-1] == vocab.eos_id


def test_multi_token_words_shift_mask(vocab):
    tpl = get_template(1)
    short = render(tpl, WordPair("dog", "animal"), vocab)
    long = render(tpl, WordPair("New York", "city"), vocab)
    # the head appears twice before the mask in template 1
    assert long.mask_positions[0] == short.mask_positions[0] + 2
    assert long.token_ids[long.mask_positions[0]] == vocab.mask_id


def test_detokenize_round_trip(vocab):
    for tpl in builtin_templates():
        prompt = render(tpl, WordPair("sun", "star"), vocab)
        assert vocab.decode(prompt.token_ids) == " ".join(split_words(prompt.surface))


def test_apostrophes_normalized():
    assert normalize("wasn’t") == "wasn't"
    assert split_words("[h]’s") == split_words("[h]'s")


def test_template_requires_all_markers():
    with pytest.raises(TemplateError):
        PromptTemplate(9, "[h] and [t] only")
    with pytest.raises(TemplateError):
        PromptTemplate(9, "[h] is a <mask>")


def test_unknown_template_id():
    with pytest.raises(TemplateError):
        get_template(6)


def test_load_templates(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# custom\n\n[h] likes [t] : <mask>\n[t] <mask> [h]\n", encoding="utf-8")
    templates = load_templates(path)
    assert [t.id for t in templates] == [1, 2]
    assert templates[1].text == "[t] <mask> [h]"


def test_mask_marker_inside_pair_rejected(vocab):
    with pytest.raises(TemplateError):
        render(get_template(1), WordPair("<mask>", "x"), vocab)


def test_fill_does_not_resubstitute():
    assert fill(PromptTemplate(1, "[h] / [t] <mask>"), WordPair("[t]", "b")) == "[t] / b <mask>"


words = st.text(alphabet="abcdefgh", min_size=1, max_size=6)


@given(a=st.tuples(words, words), b=st.tuples(words, words))
def test_render_injective(a, b):
    pa, pb = WordPair(*a), WordPair(*b)
    for tpl in builtin_templates():
        if pa != pb:
            assert fill(tpl, pa) != fill(tpl, pb)
