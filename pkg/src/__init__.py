# ##################################################################
# src package
# multiple anchor learning: scenes, scorer, training, evaluation and cli
