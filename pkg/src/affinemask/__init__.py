"""Multi-domain learning on a frozen backbone.

Each new domain learns a binary mask per layer plus four scalars that turn the
frozen weights ``W`` into ``k0*W + k1 + k2*M + k3*(W*M)``. Its batch norm and
classifier are private too. Adding a domain never touches the backbone, so
earlier domains are not forgotten.
"""
__version__ = "0.1.0"
