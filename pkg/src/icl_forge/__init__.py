"""Noise-robust demonstration selection for in-context learning.

Selection baselines (random, top-K similarity, DPP MAP) plus a local
perplexity-ranking filter that flags candidates scoring high within their
nearest-neighbor cluster and substitutes clean neighbors, with noise
simulation and EM/BLEU evaluation around it.
"""

from .corpus import (
    Dataset,
    Example,
    NoiseSpec,
    import_relevant_noise,
    inject_irrelevant_noise,
    load_dataset,
    save_dataset,
    split_pool,
)
from .embedspace import (
    Bm25NeighborSource,
    Bm25Params,
    EmbeddingMatrix,
    NeighborCluster,
    NeighborIndex,
    bm25_score,
    brute_force_knn,
    build_index,
    cosine_similarity,
    fit_bm25,
    knn_query,
    load_embeddings_jsonl,
    load_embeddings_packed,
    save_embeddings_jsonl,
    save_embeddings_packed,
    tokenize,
)
from .evaluation import (
    EchoBackend,
    EvalConfig,
    EvalReport,
    HttpInferenceBackend,
    PromptTemplate,
    assemble_prompt,
    bleu,
    bleu_tokenize,
    corpus_bleu,
    exact_match,
    generate,
    normalize_answer,
    run_eval,
)
from .lpr import (
    LprConfig,
    RankList,
    SubstitutionRecord,
    flag_candidate,
    global_rank_filter,
    label_agreement_filter,
    local_rank,
    lpr_filter,
    reorder_by_similarity,
    substitute,
)
from .planted import PlantedCorpus, make_planted_corpus
from .scoring import (
    CountingBackend,
    FileScoreBackend,
    HttpScoreBackend,
    PerplexityScore,
    ScoreCache,
    SyntheticScorerModel,
    TokenLogProbs,
    batch_score,
    perplexity_from_logprobs,
    score_example,
)
from .selectors import (
    DemonstrationSet,
    DppKernel,
    SelectorConfig,
    build_dpp_kernel,
    greedy_map_logdet,
    select_dpp,
    select_random,
    select_topk,
)

__version__ = "0.1.0"
