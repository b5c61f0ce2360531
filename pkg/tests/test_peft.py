import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_batch, tiny_config
from peftweave.model import ModelConfig, TinyTransformer
from peftweave.peft import (LANGUAGE, TASK, TASK_VARIANTS, Adapter, AdapterSet, SoftPrompt, Variant,
                            adapter_forward, adapter_parameter_count, assemble, baseline, concat_prompts,
                            init_soft_prompt, stack_adapters, trainable_parameter_count)


def scalar_adapter(down: float, up: float) -> Adapter:
    a = Adapter(1, 1)
    with torch.no_grad():
        a.down.weight.fill_(down)
        a.up.weight.fill_(up)
        a.down.bias.zero_()
        a.up.bias.zero_()
    return a


def test_adapter_scalar_examples():
    a = scalar_adapter(1.0, 3.0)
    assert adapter_forward(torch.tensor([2.0]), a).item() == 8.0
    assert adapter_forward(torch.tensor([-1.0]), a).item() == -1.0


def test_adapter_identity_at_init_and_width_check():
    a = Adapter(16, 4)
    h = torch.randn(3, 5, 16)
    assert torch.equal(adapter_forward(h, a), h)
    with pytest.raises(ValueError):
        adapter_forward(torch.randn(2, 8), a)
    with pytest.raises(ValueError):
        Adapter(16, 0)
    with pytest.raises(ValueError):
        Adapter(16, 17)


def test_adapter_parameter_count():
    a = Adapter(64, 16)
    assert sum(p.numel() for p in a.parameters()) == 64 * 16 + 16 + 16 * 64 + 64 == 2128


def test_stack_scalar_example():
    lang, task = scalar_adapter(1.0, 1.0), scalar_adapter(1.0, 2.0)
    assert stack_adapters(torch.tensor([1.0]), lang, task).item() == 6.0


def test_stack_with_identity_member():
    trained = Adapter(8, 2)
    with torch.no_grad():
        trained.up.weight.normal_()
    fresh = Adapter(8, 2)
    h = torch.randn(4, 8)
    assert torch.equal(stack_adapters(h, trained, fresh), adapter_forward(h, trained))
    assert torch.equal(stack_adapters(h, fresh, trained), adapter_forward(h, trained))
    with pytest.raises(ValueError):
        stack_adapters(h, trained, Adapter(4, 2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_stack_order_matters_in_general(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = Adapter(4, 2), Adapter(4, 2)
    with torch.no_grad():
        for p in list(a.parameters()) + list(b.parameters()):
            p.copy_(torch.randn(p.shape, generator=g))
    h = torch.randn(16, 4, generator=g)
    ab, ba = stack_adapters(h, a, b), stack_adapters(h, b, a)
    if torch.allclose(ab, ba):
        # only possible when both branches are inactive on every row
        assert torch.equal(ab, h)


def test_init_soft_prompt_cyclic_and_truncated():
    table = torch.arange(300 * 4, dtype=torch.float32).view(300, 4)
    p = init_soft_prompt("abc", 7, table)
    rows = [ord(c) for c in "abcabca"]
    assert torch.equal(p.embedding, table[rows])
    p = init_soft_prompt("abcde", 2, table)
    assert torch.equal(p.embedding, table[[ord("a"), ord("b")]])
    with pytest.raises(ValueError):
        init_soft_prompt("", 3, table)
    with pytest.raises(ValueError):
        init_soft_prompt("a", 0, table)


def test_init_soft_prompt_paper_template_and_copy_semantics():
    model = TinyTransformer(ModelConfig())
    p = init_soft_prompt("Generate the output in Slovak:", 50, model.embed.weight)
    assert p.embedding.shape == (50, 64)
    with torch.no_grad():
        p.embedding.add_(1.0)
    assert not torch.equal(p.embedding[0], model.embed.weight[ord("G")])


def test_concat_prompts_order():
    lang = SoftPrompt(torch.randn(50, 8), LANGUAGE)
    task = SoftPrompt(torch.randn(50, 8), TASK)
    both = concat_prompts(lang, task)
    assert both.shape == (100, 8)
    assert torch.equal(both[:50], lang.embedding) and torch.equal(both[50:], task.embedding)
    with pytest.raises(ValueError):
        SoftPrompt(torch.randn(0, 8))
    with pytest.raises(ValueError):
        concat_prompts(lang, SoftPrompt(torch.randn(3, 4)))


def artifacts_for(variant: Variant, model: TinyTransformer):
    cfg = model.cfg
    lang = None
    if variant.language_kind == "adapter":
        lang = AdapterSet(cfg, LANGUAGE, seed=1)
    elif variant.language_kind == "prompt":
        lang = init_soft_prompt("Generate the output in X:", 6, model.embed.weight, role=LANGUAGE)
    task = None
    if variant.task_kind == "adapter":
        task = AdapterSet(cfg, TASK, seed=2)
    elif variant.task_kind == "prompt":
        task = init_soft_prompt("Answer the question in X language:", 5, model.embed.weight)
    return lang, task


EXPECTED_TRAINABLE = {
    Variant.TASK_ADAPTER: "task_adapter",
    Variant.TASK_PROMPT: "task_prompt",
    Variant.LANG_ADAPTER_TASK_ADAPTER: "task_adapter",
    Variant.LANG_ADAPTER_TASK_PROMPT: "task_prompt",
    Variant.LANG_PROMPT_TASK_ADAPTER: "task_adapter",
    Variant.LANG_PROMPT_TASK_PROMPT: "task_prompt",
    Variant.LANG_ADAPTER: "lang_adapter",
    Variant.LANG_PROMPT: "lang_prompt",
}


@pytest.mark.parametrize("variant", list(Variant))
def test_assemble_freeze_mask_and_gradients(variant):
    model = TinyTransformer(tiny_config())
    lang, task = artifacts_for(variant, model)
    asm = assemble(model, variant, language=lang, task=task)
    assert asm.freeze_mask == {EXPECTED_TRAINABLE[variant]}
    src, tgt = random_batch(model.cfg, 2, 6, 4)
    asm(src, tgt).loss.backward()
    groups = asm.groups()
    for group, tensors in groups.items():
        for name, p in tensors:
            if group in asm.freeze_mask:
                assert p.grad is not None, name
            else:
                assert p.grad is None, name


def test_assemble_slots():
    model = TinyTransformer(tiny_config())
    lang, task = artifacts_for(Variant.LANG_PROMPT_TASK_PROMPT, model)
    state = assemble(model, Variant.LANG_PROMPT_TASK_PROMPT, language=lang, task=task).peft_state()
    assert state.adapters is None and state.prompt.shape[0] == 11
    lang, task = artifacts_for(Variant.LANG_ADAPTER_TASK_ADAPTER, model)
    state = assemble(model, Variant.LANG_ADAPTER_TASK_ADAPTER, language=lang, task=task).peft_state()
    assert state.prompt is None
    assert all(stack[0] is lang[i] and stack[1] is task[i] for i, stack in enumerate(state.adapters))
    lang, task = artifacts_for(Variant.LANG_PROMPT_TASK_ADAPTER, model)
    state = assemble(model, Variant.LANG_PROMPT_TASK_ADAPTER, language=lang, task=task).peft_state()
    assert state.prompt is lang.embedding and [len(s) for s in state.adapters] == [1, 1]


def test_assemble_rejects_bad_artifacts():
    model = TinyTransformer(tiny_config())
    with pytest.raises(ValueError, match="requires"):
        assemble(model, Variant.LANG_ADAPTER_TASK_ADAPTER, task=AdapterSet(model.cfg, TASK))
    with pytest.raises(ValueError, match="d_model"):
        assemble(model, Variant.TASK_ADAPTER, task=AdapterSet(tiny_config(d_model=32, n_heads=2), TASK))
    with pytest.raises(ValueError, match="layers"):
        assemble(model, Variant.TASK_ADAPTER, task=AdapterSet(tiny_config(n_enc_layers=2), TASK))
    with pytest.raises(TypeError):
        assemble(model, Variant.TASK_PROMPT, task=AdapterSet(model.cfg, TASK))
    with pytest.raises(ValueError, match="takes no"):
        assemble(model, Variant.TASK_PROMPT, language=AdapterSet(model.cfg, LANGUAGE),
                 task=SoftPrompt(torch.zeros(2, 16)))


def test_baseline_trains_nothing():
    asm = baseline(TinyTransformer(tiny_config()))
    assert asm.freeze_mask == frozenset() and asm.trainable_parameters() == []


def test_trainable_parameter_counts():
    cfg = ModelConfig()
    assert adapter_parameter_count(64, 16, 4) == 8512
    assert trainable_parameter_count(Variant.TASK_ADAPTER, cfg) == 8512
    assert trainable_parameter_count(Variant.TASK_PROMPT, cfg) == 3200
    assert trainable_parameter_count(Variant.LANG_PROMPT_TASK_ADAPTER, cfg) == 8512
    model = TinyTransformer(cfg)
    for v in Variant:
        lang = task = None
        if v.language_kind == "adapter":
            lang = AdapterSet(cfg, LANGUAGE)
        elif v.language_kind == "prompt":
            lang = init_soft_prompt("Generate the output in X:", 50, model.embed.weight, role=LANGUAGE)
        if v.task_kind == "adapter":
            task = AdapterSet(cfg, TASK)
        elif v.task_kind == "prompt":
            task = init_soft_prompt("Answer:", 50, model.embed.weight)
        asm = assemble(model, v, language=lang, task=task)
        assert sum(p.numel() for p in asm.trainable_parameters()) == trainable_parameter_count(v, cfg)


@pytest.mark.parametrize("variant", TASK_VARIANTS)
def test_fresh_adapters_preserve_logits(variant):
    model = TinyTransformer(tiny_config())
    src, tgt = random_batch(model.cfg, 3, 7, 4, seed=11)
    lang, task = artifacts_for(variant, model)
    prompt_only = assemble(model, variant, language=lang, task=task)
    # drop the adapters: logits must match the same prompts with fresh adapters installed
    state = prompt_only.peft_state()
    ref = model(src, tgt, type(state)(adapters=None, prompt=state.prompt)).logits
    assert torch.equal(prompt_only(src, tgt).logits, ref)


def test_checkpoint_tensor_names():
    model = TinyTransformer(tiny_config())
    lang, task = artifacts_for(Variant.LANG_ADAPTER_TASK_ADAPTER, model)
    asm = assemble(model, Variant.LANG_ADAPTER_TASK_ADAPTER, language=lang, task=task)
    names = [n for n, _ in asm.peft_tensors()]
    assert "lang_adapter.0.down.weight" in names and "task_adapter.1.up.bias" in names
    lang, task = artifacts_for(Variant.LANG_PROMPT_TASK_PROMPT, model)
    asm = assemble(model, Variant.LANG_PROMPT_TASK_PROMPT, language=lang, task=task)
    assert [n for n, _ in asm.peft_tensors()] == ["lang_prompt.embedding", "task_prompt.embedding"]


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_generate_invariant_to_positive_logit_scaling(scale, seed):
    model = TinyTransformer(tiny_config())
    src, _ = random_batch(model.cfg, 2, 5, 2, seed=seed)
    before = model.generate(src, max_new_tokens=4)
    # the tied projection is linear in the final LayerNorm output
    with torch.no_grad():
        model.dec_ln.weight.mul_(scale)
        model.dec_ln.bias.mul_(scale)
    assert model.generate(src, max_new_tokens=4) == before


def test_variant_parse_and_order():
    assert Variant.parse("SoftLangPrompt+TaskAdapter") is Variant.LANG_PROMPT_TASK_ADAPTER
    assert Variant.parse("TASK_PROMPT") is Variant.TASK_PROMPT
    with pytest.raises(ValueError):
        Variant.parse("LoRA")
    assert [v.value for v in TASK_VARIANTS] == [
        "TaskAdapterOnly", "SoftTaskPromptOnly", "LangAdapter+TaskAdapter", "LangAdapter+SoftTaskPrompt",
        "SoftLangPrompt+TaskAdapter", "SoftLangPrompt+SoftTaskPrompt"]
