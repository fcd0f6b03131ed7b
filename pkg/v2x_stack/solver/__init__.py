""" Convex QP and branch-and-bound solvers used by the scheduling model. """
