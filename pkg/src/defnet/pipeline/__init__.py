"""Toy detection pipeline: data, proposals, rejection, scoring, context, regression, ensembling."""
