citations = {
    "iguane": """
@misc{iguane,
 title = {iguane: many-to-one adversarial harmonization of 3D MR images},
 howpublished = {Python package},
 note = {version 0.1}
}
""",
    "numpy": """
@Article{numpy,
 title = {Array programming with {NumPy}},
 author = {Charles R. Harris and K. Jarrod Millman and St{\\'{e}}fan J.
        van der Walt and Ralf Gommers and Pauli Virtanen and others},
 year = {2020},
 journal = {Nature},
 volume = {585},
 number = {7825},
 pages = {357--362},
 doi = {10.1038/s41586-020-2649-2}
}
""",
    "scipy": """
@ARTICLE{scipy,
  author  = {Virtanen, Pauli and Gommers, Ralf and Oliphant, Travis E. and
            Haberland, Matt and Reddy, Tyler and others},
  title   = {{{SciPy} 1.0: Fundamental Algorithms for Scientific
            Computing in Python}},
  journal = {Nature Methods},
  year    = {2020},
  volume  = {17},
  pages   = {261--272},
  doi     = {10.1038/s41592-019-0686-2}
}
""",
    "torch": """
@inproceedings{torch,
 title = {PyTorch: An Imperative Style, High-Performance Deep Learning Library},
 author = {Paszke, Adam and Gross, Sam and Massa, Francisco and Lerer, Adam and others},
 booktitle = {Advances in Neural Information Processing Systems 32},
 pages = {8024--8035},
 year = {2019}
}
""",
    "nibabel": """
@misc{nibabel,
 title = {NiBabel: access a cacophony of neuro-imaging file formats},
 author = {Brett, Matthew and Markiewicz, Christopher J. and Hanke, Michael and others},
 doi = {10.5281/zenodo.591597}
}
""",
    "cyclegan": """
@inproceedings{cyclegan,
 title = {Unpaired Image-to-Image Translation Using Cycle-Consistent Adversarial Networks},
 author = {Zhu, Jun-Yan and Park, Taesung and Isola, Phillip and Efros, Alexei A.},
 booktitle = {IEEE International Conference on Computer Vision (ICCV)},
 year = {2017}
}
""",
    "histogram_matching": """
@article{histogram_matching,
 title = {Evaluating intensity normalization on {MRIs} of human brain with multiple sclerosis},
 author = {Shah, Mohak and Xiao, Yiming and Subbanna, Nagesh and others},
 journal = {Medical Image Analysis},
 volume = {15},
 number = {2},
 pages = {267--282},
 year = {2011}
}
""",
    "whitestripe": """
@article{whitestripe,
 title = {Statistical normalization techniques for magnetic resonance imaging},
 author = {Shinohara, Russell T. and Sweeney, Elizabeth M. and Goldsmith, Jeff and others},
 journal = {NeuroImage: Clinical},
 volume = {6},
 pages = {9--19},
 year = {2014}
}
""",
    "ssim": """
@article{ssim,
 title = {Image quality assessment: from error visibility to structural similarity},
 author = {Wang, Zhou and Bovik, Alan C. and Sheikh, Hamid R. and Simoncelli, Eero P.},
 journal = {IEEE Transactions on Image Processing},
 volume = {13},
 number = {4},
 pages = {600--612},
 year = {2004}
}
""",
    "clustered_wilcoxon": """
@article{clustered_wilcoxon,
 title = {Incorporation of clustering effects for the {Wilcoxon} rank sum test: a large-sample approach},
 author = {Rosner, Bernard and Glynn, Robert J. and Lee, Mei-Ling Ting},
 journal = {Biometrics},
 volume = {59},
 number = {4},
 pages = {1089--1098},
 year = {2003}
}
""",
    "benjamini_hochberg": """
@article{benjamini_hochberg,
 title = {Controlling the false discovery rate: a practical and powerful approach to multiple testing},
 author = {Benjamini, Yoav and Hochberg, Yosef},
 journal = {Journal of the Royal Statistical Society: Series B},
 volume = {57},
 number = {1},
 pages = {289--300},
 year = {1995}
}
""",
    "steiger": """
@article{steiger,
 title = {Tests for comparing elements of a correlation matrix},
 author = {Steiger, James H.},
 journal = {Psychological Bulletin},
 volume = {87},
 number = {2},
 pages = {245--251},
 year = {1980}
}
""",
    "brain_age_cnn": """
@article{brain_age_cnn,
 title = {Predicting brain age with deep learning from raw imaging data results in a reliable and heritable biomarker},
 author = {Cole, James H. and Poudel, Rudra P. K. and Tsagkrasoulis, Dimosthenis and others},
 journal = {NeuroImage},
 volume = {163},
 pages = {115--124},
 year = {2017}
}
""",
    "hdbet": """
@article{hdbet,
 title = {Automated brain extraction of multisequence {MRI} using artificial neural networks},
 author = {Isensee, Fabian and Schell, Marianne and Pflueger, Irada and others},
 journal = {Human Brain Mapping},
 volume = {40},
 number = {17},
 pages = {4952--4964},
 year = {2019}
}
""",
    "n4": """
@article{n4,
 title = {{N4ITK}: Improved {N3} Bias Correction},
 author = {Tustison, Nicholas J. and Avants, Brian B. and Cook, Philip A. and others},
 journal = {IEEE Transactions on Medical Imaging},
 volume = {29},
 number = {6},
 pages = {1310--1320},
 year = {2010}
}
""",
    "flirt": """
@article{flirt,
 title = {Improved optimization for the robust and accurate linear registration and motion correction of brain images},
 author = {Jenkinson, Mark and Bannister, Peter and Brady, Michael and Smith, Stephen},
 journal = {NeuroImage},
 volume = {17},
 number = {2},
 pages = {825--841},
 year = {2002}
}
""",
}
