# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Behavior index and BM25 search
#
# Every historical interaction is a small document of feature tokens.  An
# inverted index over those tokens lets a query such as
# `user_id_0 AND (category_3 OR season_summer)` pull the relevant part of a
# long history without scanning all of it.

# %%
from __future__ import annotations

from retrieval_ctr.archive import BehaviorDoc, Query, SearchStats, bm25_score, build_index, idf, posting, search

docs = [
    BehaviorDoc(0, "user_id_0", ("item_id_1", "category_3", "season_winter"), 100),
    BehaviorDoc(1, "user_id_0", ("item_id_2", "category_5", "season_summer"), 200),
    BehaviorDoc(2, "user_id_0", ("item_id_7", "category_3", "season_summer"), 300),
    BehaviorDoc(3, "user_id_1", ("item_id_1", "category_3", "season_summer"), 150),
    BehaviorDoc(4, "user_id_0", ("item_id_9", "category_8", "season_spring"), 400),
]
archive = build_index(docs)
archive

# %% [markdown]
# Posting lists are sorted doc ids.  IDF uses the natural log and goes
# negative for tokens present in more than half the documents.

# %%
for tok in ("category_3", "season_summer", "item_id_9", "user_id_0"):
    print(f"{tok:15s} postings={posting(archive, tok)}  idf={idf(archive, tok):+.4f}")

# %% [markdown]
# With one occurrence per token and equal document lengths, the Okapi
# score of a document is just the sum of IDF over the query tokens it
# contains.

# %%
q = {"category_3", "season_summer"}
for d in docs[:3]:
    closed = sum(idf(archive, t) for t in q if t in d.tokens)
    print(d.doc_id, round(bm25_score(archive, q, d), 12), round(closed, 12))

# %% [markdown]
# `search` keeps only the user's documents strictly before the cutoff,
# ranks by score, breaks ties by recency and then doc id, and falls back
# to the most recent behaviors when nothing matches.

# %%
stats = SearchStats()
print(search(archive, Query("user_id_0", ("category_3", "season_summer")), 2, 350, stats))
print(stats)
print(search(archive, Query("user_id_0", ("category_99",)), 2, None))
